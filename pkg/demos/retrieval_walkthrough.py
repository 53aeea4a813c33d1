"""
Which memory samples should be replayed next?
==============================================

Each stored sample keeps a use counter that decays over time, so that a
sample replayed long ago looks fresh again.  Similar classes also share
credit: training on class A partly counts as training on a class whose
gradients point the same way.  Retrieval favours samples with a low
effective count.
"""
import numpy as np

from budgetcl.memory import MemoryStore
from budgetcl.retrieval import (decay_rate, draw_batch, effective_use_frequency, retrieval_probs,
                                update_similarity)

rng = np.random.default_rng(1)
store = MemoryStore(capacity=12, sample_shape=(1,), n_classes=3)
for y in [0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2]:
    store.insert(np.zeros(1, np.uint8), y, rng)

###############################################################################
# Suppose classes 0 and 1 produce nearly parallel gradients and class 2 is
# unrelated.  A handful of similarity updates moves S towards those cosines.

S = np.zeros((3, 3))
base = rng.normal(size=(3, 20))
base[1] = base[0] + 0.1 * rng.normal(size=20)
for _ in range(300):
    labels = rng.integers(0, 3, 16)
    grads = base[labels] + 0.3 * rng.normal(size=(16, 20))
    update_similarity(S, grads, labels, alpha=0.05)
print("class similarity:\n", np.round(S, 2))

###############################################################################
# Heavy use of class 0 now also raises the effective count of class 1.

store.bump([0, 1, 2, 3])
store.bump([0, 1, 2, 3])
c_hat = effective_use_frequency(store.c[:12], store.labels[:12], S, store.C)
p = retrieval_probs(c_hat, temperature=4.0)
for y in range(3):
    print(f"class {y}: effective count {c_hat[store.labels[:12] == y].mean():.2f}, "
          f"retrieval mass {p[store.labels[:12] == y].sum():.2f}")

###############################################################################
# Counts fade by (1 - r) per step with r = B / (k |M|).

r = decay_rate(batch_size=4, k=4, mem_size=12)
for step in range(5):
    idx = draw_batch(retrieval_probs(effective_use_frequency(store.c[:12], store.labels[:12], S, store.C), 4.0),
                     4, rng)
    store.decay_all(r)
    store.bump(idx)
    print(f"step {step}: drew classes {sorted(store.labels[idx].tolist())}")
