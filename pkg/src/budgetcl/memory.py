"""Class-balanced replay memory with discounted use-frequency bookkeeping."""
from __future__ import annotations

import numpy as np


class MemoryStore:
    """Fixed-capacity replay buffer.

    Slots are filled in arrival order; when full, an incoming sample replaces a
    sample drawn uniformly from the classes that currently hold the most
    samples (greedy balancing). ``c`` holds the per-sample discounted use
    frequency and ``C`` its per-class sums.
    """

    def __init__(self, capacity: int, sample_shape, n_classes: int, dtype=np.uint8):
        if capacity < 1:
            raise ValueError("memory capacity must be at least 1")
        self.capacity = int(capacity)
        self.n_classes = int(n_classes)
        self.features = np.zeros((self.capacity, *sample_shape), dtype=dtype)
        self.labels = np.zeros(self.capacity, dtype=np.int64)
        self.c = np.zeros(self.capacity, dtype=np.float64)
        self.C = np.zeros(self.n_classes, dtype=np.float64)
        self.class_slots: dict[int, list[int]] = {}
        self.size = 0
        self.eviction_log: list[tuple[int, int, int]] = []   # (label, its count, max count)

    def __len__(self) -> int:
        return self.size

    def counts(self) -> dict[int, int]:
        return {y: len(s) for y, s in sorted(self.class_slots.items()) if s}

    @property
    def seen_classes(self) -> list[int]:
        return sorted(y for y, s in self.class_slots.items() if s)

    def insert(self, x, y: int, rng: np.random.Generator) -> int | None:
        """Insert one sample with c=0; returns the evicted slot, if any."""
        y = int(y)
        if not 0 <= y < self.n_classes:
            raise ValueError(f"label {y} outside [0, {self.n_classes})")
        evicted = None
        if self.size < self.capacity:
            slot = self.size
            self.size += 1
        else:
            # the incoming sample counts toward its class, so a full class replaces its own
            counts = self.counts()
            counts[y] = counts.get(y, 0) + 1
            top = max(counts.values())
            pool = [s for cls, n in counts.items() if n == top
                    for s in sorted(self.class_slots.get(cls, []))]
            slot = pool[int(rng.integers(len(pool)))]
            old = int(self.labels[slot])
            self.eviction_log.append((old, counts[old], top))
            self.class_slots[old].remove(slot)
            self.C[old] -= self.c[slot]
            evicted = slot
        self.features[slot] = x
        self.labels[slot] = y
        self.c[slot] = 0.0
        self.class_slots.setdefault(y, []).append(slot)
        return evicted

    def decay_all(self, r: float) -> None:
        if not 0.0 <= r < 1.0:
            raise ValueError(f"decay rate {r} outside [0, 1)")
        self.c[: self.size] *= 1.0 - r
        self.C *= 1.0 - r

    def bump(self, indices) -> None:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return
        if idx.min() < 0 or idx.max() >= self.size:
            raise IndexError(f"memory index out of range [0, {self.size})")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate memory indices in bump")
        self.c[idx] += 1.0
        np.add.at(self.C, self.labels[idx], 1.0)

    def batch(self, indices, scale: float = 255.0, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
        """Assemble a training batch; byte features are scaled into [0, 1] here."""
        x = self.features[indices].astype(dtype)
        if scale != 1.0:
            x /= scale
        return x, self.labels[indices].copy()
