"""
How much of the network is worth training on this batch?
=========================================================

Every few steps the model trains all layers and refreshes a running estimate
of how much each layer still learns (the trace of its Fisher information).
On the steps in between, each batch is scored: freezing the first ``n``
layers saves their backward FLOPs, but loses whatever those layers would
have learned from this particular batch.
"""
import numpy as np

from budgetcl.freezing import FreezePolicy, FreezeState, argmax_last, bfc, choose_depth, info_per_cost

###############################################################################
# A three-layer toy: equal costs, with the deeper layers holding more information.

ff = np.array([10, 10, 10])
bf = np.array([20, 20, 20])
trF = np.array([1.0, 2.0, 3.0])

ic = info_per_cost(trF, ff.sum(), bf)
print("information per FLOP, n = 0..3:", np.round(ic, 5))

###############################################################################
# A batch with typical gradient magnitude (rho = 1) freezes only the first
# layer.  A quiet batch (rho = 0.1) is not worth any backward pass at all.

for rho in (1.0, 0.1, 10.0):
    crit = bfc(trF, bf, rho, ic.max())
    print(f"rho={rho:<5} BFC={np.round(crit, 4)}  ->  freeze {argmax_last(crit)} layers")

###############################################################################
# The same decision inside the step loop.  Step 0 (and every 4th step after it)
# is a full step that the caller uses to refresh the Fisher estimate.

state = FreezeState.fresh(3)
state.trF[:] = trF
state.gnorm_sq_ema = 1.0      # as if a typical batch had |g|^2 = 1
rng = np.random.default_rng(0)
for t in range(8):
    g_sq = float(rng.exponential(1.0))
    dec = choose_depth(state, FreezePolicy("adaptive"), list(ff), list(bf), g_sq, total_steps=8)
    kind = "fisher" if dec.fisher_step else f"rho={dec.rho:.2f}"
    print(f"step {t}: n*={dec.n_star}  ({kind})")
