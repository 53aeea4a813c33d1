"""Small desk-scale datasets as 8-bit image sample sets."""
from __future__ import annotations

import numpy as np

from .stream import SampleSet


def digits() -> SampleSet:
    """The 8x8 handwritten digits bundled with scikit-learn, rescaled to 0..255."""
    from sklearn.datasets import load_digits

    d = load_digits()
    x = np.clip(np.rint(d.images * (255.0 / 16.0)), 0, 255).astype(np.uint8)
    return SampleSet(x[:, None, :, :], d.target.astype(np.int64), 10)


def blobs(n_classes: int = 10, per_class: int = 300, shape=(1, 8, 8), noise: float = 60.0,
          seed: int = 0) -> SampleSet:
    """Gaussian clusters around random 8-bit class prototypes."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 255, size=(n_classes, *shape))
    y = np.repeat(np.arange(n_classes), per_class)
    x = protos[y] + rng.normal(0.0, noise, size=(len(y), *shape))
    x = np.clip(np.rint(x), 0, 255).astype(np.uint8)
    perm = rng.permutation(len(y))
    return SampleSet(x[perm], y[perm], n_classes)
