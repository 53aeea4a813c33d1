"""
Trading model copies for replay samples
=======================================

Under a fixed number of bytes, anything a method keeps next to the model
(extra model copies, logits, statistics) is paid for with replay samples.
"""
from budgetcl.ledger import BYTES_PER_FLOAT, memory_capacity, mib, plan_memory

budget = 8_000_000
params = 463_504           # a 32-layer residual network for 32x32 colour images
sample = 3 * 32 * 32       # one image stored as raw bytes

for copies in (1, 2, 3):
    cap = memory_capacity(budget, copies, params, 0, sample)
    print(f"{copies} model cop{'y' if copies == 1 else 'ies'}: {cap} images")

###############################################################################
# Budgets are often quoted in MB; the planner works in MiB.

plan = plan_memory(mib(7.6), params, sample)
print(plan)
print(f"model takes {plan.model_bytes / 2**20:.2f} MiB ({BYTES_PER_FLOAT} bytes per parameter), "
      f"replay takes {plan.capacity * sample / 2**20:.2f} MiB")
