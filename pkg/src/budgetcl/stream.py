"""Datasets, class-incremental stream schedules, evaluation and accuracy metrics."""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .netcore import Network, forward, profile_layers

MAGIC = b"SDS1"
_HEADER = struct.Struct("<4s5I")
_LABEL = struct.Struct("<I")


class FormatError(ValueError):
    pass


@dataclass
class SampleSet:
    x: np.ndarray               # (N, C, H, W) uint8
    y: np.ndarray               # (N,) int64
    n_classes: int

    def __len__(self) -> int:
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    @property
    def sample_bytes(self) -> int:
        return int(np.prod(self.sample_shape))


@dataclass
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    n_classes: int

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])

    @property
    def sample_bytes(self) -> int:
        return int(np.prod(self.sample_shape))


# --- file formats ---------------------------------------------------------------

def write_sds1(path, samples: SampleSet) -> None:
    x = np.ascontiguousarray(samples.x, dtype=np.uint8)
    if x.ndim != 4:
        raise FormatError("SDS1 samples must be (N, C, H, W)")
    n, c, h, w = x.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, c, h, w, samples.n_classes))
        for i in range(n):
            fh.write(_LABEL.pack(int(samples.y[i])))
            fh.write(x[i].tobytes())


def read_sds1(path) -> SampleSet:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    magic, n, c, h, w, k = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at offset 0, expected {MAGIC!r}")
    if min(c, h, w, k) == 0:
        raise FormatError(f"{path}: zero extent in header at offset 4")
    per = c * h * w
    rec = _LABEL.size + per
    expected = _HEADER.size + n * rec
    if len(data) != expected:
        raise FormatError(f"{path}: size mismatch at offset {min(len(data), expected)}: "
                          f"header declares {n} samples of {per} bytes ({expected} bytes total), "
                          f"file has {len(data)}")
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size).reshape(n, rec)
    y = body[:, :4].copy().view("<u4").reshape(n).astype(np.int64)
    bad = np.nonzero(y >= k)[0]
    if len(bad):
        raise FormatError(f"{path}: label {y[bad[0]]} >= n_classes {k} at offset {_HEADER.size + bad[0] * rec}")
    x = body[:, 4:].reshape(n, c, h, w).copy()
    return SampleSet(x, y, int(k))


def read_csv(path, shape: tuple[int, int, int] | None = None, n_classes: int | None = None) -> SampleSet:
    """CSV with header ``label,p0,p1,...`` and u8 pixel values per row."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    if not header or header[0].strip() != "label":
        raise FormatError(f"{path}: header must start with 'label'")
    n_pix = len(header) - 1
    if shape is None:
        shape = (1, n_pix, 1)
    if int(np.prod(shape)) != n_pix:
        raise FormatError(f"{path}: header has {n_pix} pixels, shape {shape} needs {int(np.prod(shape))}")
    body = rows[1:]
    out = np.empty((len(body), n_pix + 1), dtype=np.int64)
    for r, row in enumerate(body):
        if len(row) != n_pix + 1:
            raise FormatError(f"{path}: row {r + 2} has {len(row)} fields, header has {n_pix + 1}")
        try:
            out[r] = [int(v) for v in row]
        except ValueError:
            raise FormatError(f"{path}: non-integer value in row {r + 2}") from None
    if out[:, 1:].size and (out[:, 1:].min() < 0 or out[:, 1:].max() > 255):
        raise FormatError(f"{path}: pixel values must be in [0, 255]")
    y = out[:, 0]
    if y.size and y.min() < 0:
        raise FormatError(f"{path}: negative label")
    k = n_classes if n_classes is not None else (int(y.max()) + 1 if y.size else 0)
    if y.size and y.max() >= k:
        raise FormatError(f"{path}: label {int(y.max())} >= n_classes {k}")
    return SampleSet(out[:, 1:].astype(np.uint8).reshape(len(body), *shape), y, k)


def write_csv(path, samples: SampleSet) -> None:
    flat = samples.x.reshape(len(samples), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"] + [f"p{i}" for i in range(flat.shape[1])])
        for y, row in zip(samples.y, flat):
            w.writerow([int(y)] + row.tolist())


def convert_dataset(in_csv, out_sds1, shape=None, n_classes=None) -> SampleSet:
    s = read_csv(in_csv, shape, n_classes)
    write_sds1(out_sds1, s)
    return s


def read_samples(path, fmt: str | None = None, shape=None) -> SampleSet:
    fmt = fmt or ("csv" if str(path).endswith(".csv") else "sds1")
    if fmt == "sds1":
        return read_sds1(path)
    if fmt == "csv":
        return read_csv(path, shape)
    raise ValueError(f"unknown dataset format {fmt!r}")


def split_stratified(samples: SampleSet, test_fraction: float, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    test_mask = np.zeros(len(samples), dtype=bool)
    for k in range(samples.n_classes):
        idx = np.nonzero(samples.y == k)[0]
        idx = idx[rng.permutation(len(idx))]
        test_mask[idx[: int(round(test_fraction * len(idx)))]] = True
    return Dataset(samples.x[~test_mask], samples.y[~test_mask], samples.x[test_mask],
                   samples.y[test_mask], samples.n_classes)


def load_dataset(path, fmt: str | None = None, test_path=None, test_fraction: float = 0.2,
                 split_seed: int = 0, shape=None) -> Dataset:
    """Load train (and optionally test) samples; without a test file, split stratified."""
    train = read_samples(path, fmt, shape)
    if test_path is None:
        return split_stratified(train, test_fraction, split_seed)
    test = read_samples(test_path, fmt, shape)
    if test.sample_shape != train.sample_shape:
        raise FormatError(f"test samples {test.sample_shape} differ from train {train.sample_shape}")
    k = max(train.n_classes, test.n_classes)
    return Dataset(train.x, train.y, test.x, test.y, k)


# --- schedules --------------------------------------------------------------------

@dataclass
class Schedule:
    order: np.ndarray            # train ids in arrival order
    labels: np.ndarray           # label at each position
    class_order: list[int]       # classes by first appearance
    seen_count: np.ndarray       # number of seen classes after each position
    task: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.order)

    def seen_at(self, pos: int) -> list[int]:
        return self.class_order[: int(self.seen_count[pos])]


def _finish(order: np.ndarray, labels_all: np.ndarray, task=None) -> Schedule:
    labels = labels_all[order]
    class_order: list[int] = []
    seen = set()
    counts = np.empty(len(order), dtype=np.int64)
    for i, y in enumerate(labels):
        if y not in seen:
            seen.add(int(y))
            class_order.append(int(y))
        counts[i] = len(class_order)
    return Schedule(order, labels, class_order, counts, task)


def disjoint_schedule(train_y, n_classes: int, num_tasks: int, seed: int) -> Schedule:
    """Seeded class partition into tasks; remainder classes join the last task."""
    if not 1 <= num_tasks <= n_classes:
        raise ValueError(f"num_tasks must be in [1, {n_classes}]")
    rng = np.random.default_rng(seed)
    train_y = np.asarray(train_y)
    classes = rng.permutation(n_classes)
    per = n_classes // num_tasks
    parts, tasks = [], []
    for t in range(num_tasks):
        cls = classes[t * per:(t + 1) * per] if t < num_tasks - 1 else classes[t * per:]
        ids = np.nonzero(np.isin(train_y, cls))[0]
        ids = ids[rng.permutation(len(ids))]
        parts.append(ids)
        tasks.append(np.full(len(ids), t))
    return _finish(np.concatenate(parts), train_y, np.concatenate(tasks))


def gaussian_schedule(train_y, n_classes: int, sigma_frac: float, seed: int) -> Schedule:
    """Class k arrives around (k + 0.5)/K of the stream; samples jitter around it."""
    if sigma_frac <= 0:
        raise ValueError("sigma_frac must be positive")
    rng = np.random.default_rng(seed)
    train_y = np.asarray(train_y)
    n = len(train_y)
    mu = (train_y + 0.5) / n_classes * n
    arrival = rng.normal(mu, sigma_frac * n)
    order = np.lexsort((np.arange(n), arrival))
    return _finish(order, train_y)


# --- evaluation -------------------------------------------------------------------

@dataclass(frozen=True)
class EvalRecord:
    samples_seen: int
    accuracy: float
    cum_train_flops: int = 0


def evaluate(net: Network, test_x, test_y, seen_classes, ledger=None, batch: int = 512,
             scale: float = 255.0) -> float:
    """Top-1 accuracy on the test samples of the seen classes; FLOPs go to ``ledger.eval_flops``."""
    seen = np.asarray(sorted(seen_classes))
    if seen.size == 0:
        raise ValueError("no seen classes to evaluate")
    mask = np.isin(test_y, seen)
    xs, ys = test_x[mask], np.asarray(test_y)[mask]
    if len(ys) == 0:
        return 0.0
    correct = 0
    for lo in range(0, len(ys), batch):
        xb = xs[lo:lo + batch].astype(net.dtype)
        if scale != 1.0:
            xb /= scale
        logits, _ = forward(net, xb)
        correct += int((logits.argmax(axis=1) == ys[lo:lo + batch]).sum())
    if ledger is not None:
        ledger.charge_eval(len(ys) * sum(p.ff_per_sample for p in profile_layers(net)))
    return correct / len(ys)


def a_auc(records) -> float:
    """Area under the accuracy curve at a fixed evaluation period (rectangle rule)."""
    accs = [r.accuracy if isinstance(r, EvalRecord) else float(r) for r in records]
    if not accs:
        raise ValueError("no evaluation records")
    # offset by the first value so a constant curve returns that value exactly
    base = accs[0]
    return base + math.fsum(a - base for a in accs) / len(accs)


def a_last(records) -> float:
    if not records:
        raise ValueError("no evaluation records")
    r = records[-1]
    return r.accuracy if isinstance(r, EvalRecord) else float(r)
