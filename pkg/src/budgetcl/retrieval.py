"""Similarity-aware retrieval: discounted and effective use-frequency,
class-wise gradient similarity, and temperature-softmax batch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MAX_DECAY = 1.0 - 1e-6
NORM_EPS = 1e-12


@dataclass(frozen=True)
class RetrievalConfig:
    temperature: float = 0.125
    k: float = 4.0
    alpha: float = 0.01
    batch_size: int = 16

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")


def decay_rate(batch_size: int, k: float, mem_size: int) -> float:
    if mem_size < 1:
        raise ValueError("decay rate undefined for an empty memory")
    return min(batch_size / (k * mem_size), MAX_DECAY)


def effective_use_frequency(c, labels, S, C) -> np.ndarray:
    """c_hat_i = c_i + sum_y S[y, y_i] * C_y, vectorised over the memory.

    Unseen classes carry C_y = 0, so summing over every class equals
    summing over seen ones.
    """
    c = np.asarray(c, dtype=np.float64)
    per_class = np.asarray(C, dtype=np.float64) @ np.asarray(S, dtype=np.float64)
    return c + per_class[np.asarray(labels)]


def retrieval_probs(c_hat, temperature: float) -> np.ndarray:
    c_hat = np.asarray(c_hat, dtype=np.float64)
    if c_hat.size == 0:
        raise ValueError("cannot retrieve from an empty memory")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = -c_hat / temperature
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()


def draw_batch(p, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw distinct indices by sequential draws, renormalising after each pick."""
    p = np.array(p, dtype=np.float64)
    if batch_size > len(p):
        raise ValueError(f"batch of {batch_size} exceeds memory of {len(p)}")
    out = np.empty(batch_size, dtype=np.int64)
    live = np.ones(len(p), dtype=bool)
    for j in range(batch_size):
        w = np.where(live, p, 0.0)
        total = w.sum()
        if total <= 0.0:
            # remaining mass underflowed: fall back to uniform over what is left
            w = live.astype(np.float64)
            total = w.sum()
        cdf = np.cumsum(w)
        i = int(np.searchsorted(cdf, rng.random() * total, side="right"))
        i = min(i, len(p) - 1)
        while not live[i]:
            i -= 1
        out[j] = i
        live[i] = False
    return out


def subset_size(total_params: int, fraction: float = 0.0005) -> int:
    return max(1, int(np.floor(total_params * fraction + 0.5)))


def select_param_subset(total_params: int, rng: np.random.Generator, fraction: float = 0.0005) -> np.ndarray:
    """Sorted distinct flat parameter indices, drawn once per run."""
    if total_params < 1:
        raise ValueError("network has no parameters")
    k = min(subset_size(total_params, fraction), total_params)
    return np.sort(rng.choice(total_params, size=k, replace=False))


def update_similarity(S: np.ndarray, grads: np.ndarray, labels, alpha: float) -> np.ndarray:
    """EMA update of class similarity from per-sample gradient rows.

    ``grads`` holds per-sample gradients restricted to the unfrozen subset
    coordinates. Cosines of all in-batch pairs i != j are averaged per class
    pair, then each touched entry takes one symmetric EMA step.
    """
    labels = np.asarray(labels)
    if grads.shape[1] == 0:
        return S
    g = np.asarray(grads, dtype=np.float64)
    norms = np.linalg.norm(g, axis=1)
    ok = norms >= NORM_EPS
    if ok.sum() < 2:
        return S
    g, lab = g[ok] / norms[ok, None], labels[ok]
    cos = np.clip(g @ g.T, -1.0, 1.0)
    n = len(lab)
    iu, ju = np.triu_indices(n, k=1)
    a = np.minimum(lab[iu], lab[ju])
    b = np.maximum(lab[iu], lab[ju])
    K = S.shape[0]
    sums = np.zeros((K, K))
    cnt = np.zeros((K, K))
    np.add.at(sums, (a, b), cos[iu, ju])
    np.add.at(cnt, (a, b), 1.0)
    hit = cnt > 0
    mean = np.zeros_like(sums)
    mean[hit] = sums[hit] / cnt[hit]
    hit_sym = hit | hit.T
    mean_sym = np.where(hit, mean, mean.T)
    S[hit_sym] = (1.0 - alpha) * S[hit_sym] + alpha * mean_sym[hit_sym]
    return S
