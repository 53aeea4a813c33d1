"""Small layered network with hand-written backprop, per-layer FLOP profiles,
freeze-aware backward passes and an Adam optimizer that skips frozen layers.

Layers are indexed 0..L-1 in code. A freeze depth ``n`` means layers
``0..n-1`` are frozen (no gradient work at all) and ``n..L-1`` are trained.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

Shape = tuple[int, ...]


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    args: tuple[int, ...] = ()
    seed: int | None = None

    def __str__(self) -> str:
        if not self.args:
            return self.kind
        return f"{self.kind}({','.join(str(a) for a in self.args)})"

    @property
    def parametric(self) -> bool:
        return self.kind in ("dense", "conv2d")


def dense(n_in: int, n_out: int, seed: int | None = None) -> LayerSpec:
    return LayerSpec("dense", (n_in, n_out), seed)


def conv2d(c_in, c_out, kh, kw, stride=1, pad=0, seed=None) -> LayerSpec:
    return LayerSpec("conv2d", (c_in, c_out, kh, kw, stride, pad), seed)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2d(k: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool2d", (k, k if stride is None else stride))


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


_ARITY = {"dense": (2,), "conv2d": (4, 5, 6), "relu": (0,), "maxpool2d": (1, 2), "flatten": (0,)}
_SPEC_RE = re.compile(r"^\s*([a-z0-9_]+)\s*(?:\(([^)]*)\))?\s*$")


def parse_layers(text: str) -> list[LayerSpec]:
    """Parse ``"flatten; dense(64,32); relu; dense(32,10)"`` into specs."""
    specs = []
    for tok in re.split(r"[;\n]", text):
        if not tok.strip():
            continue
        m = _SPEC_RE.match(tok)
        if m is None:
            raise ValueError(f"cannot parse layer spec {tok.strip()!r}")
        kind, argtext = m.group(1), m.group(2)
        args = tuple(int(a) for a in argtext.split(",")) if argtext and argtext.strip() else ()
        if kind not in _ARITY:
            raise ValueError(f"unknown layer kind {kind!r}")
        if len(args) not in _ARITY[kind]:
            raise ValueError(f"{kind} takes {_ARITY[kind]} arguments, got {len(args)}")
        if kind == "conv2d":
            args = args + (1, 0)[len(args) - 4:]
        elif kind == "maxpool2d" and len(args) == 1:
            args = (args[0], args[0])
        specs.append(LayerSpec(kind, args))
    return specs


def _out_shape(spec: LayerSpec, in_shape: Shape) -> Shape:
    """Per-sample output shape; raises ShapeError with a bare reason."""
    a = spec.args
    if any(v <= 0 for v in a[:4]) or (spec.kind == "conv2d" and (a[4] <= 0 or a[5] < 0)):
        raise ShapeError(f"{spec} has non-positive dimensions")
    if spec.kind == "dense":
        if in_shape != (a[0],):
            raise ShapeError(f"expects input ({a[0]},) but receives {in_shape}")
        return (a[1],)
    if spec.kind == "conv2d":
        c_in, c_out, kh, kw, stride, pad = a
        if len(in_shape) != 3 or in_shape[0] != c_in:
            raise ShapeError(f"expects input ({c_in}, H, W) but receives {in_shape}")
        ho = (in_shape[1] + 2 * pad - kh) // stride + 1
        wo = (in_shape[2] + 2 * pad - kw) // stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"kernel larger than padded input {in_shape}")
        return (c_out, ho, wo)
    if spec.kind == "maxpool2d":
        k, stride = a
        if len(in_shape) != 3:
            raise ShapeError(f"expects input (C, H, W) but receives {in_shape}")
        ho = (in_shape[1] - k) // stride + 1
        wo = (in_shape[2] - k) // stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"window larger than input {in_shape}")
        return (in_shape[0], ho, wo)
    if spec.kind == "relu":
        return in_shape
    if spec.kind == "flatten":
        return (int(np.prod(in_shape)),)
    raise ShapeError(f"unknown layer kind {spec.kind!r}")


@dataclass
class Network:
    specs: list[LayerSpec]
    params: list[dict[str, np.ndarray]]
    input_shape: Shape
    shapes: list[Shape]          # shapes[i] is the per-sample input of layer i; shapes[L] = logits
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float64))

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    @property
    def n_classes(self) -> int:
        return self.shapes[-1][0]

    @property
    def feature_dim(self) -> int:
        """Length of x_L, the input of the final classifier."""
        return self.shapes[-2][0]

    def layer_param_count(self, i: int) -> int:
        return sum(p.size for p in self.params[i].values())

    @property
    def param_count(self) -> int:
        return sum(self.layer_param_count(i) for i in range(self.n_layers))

    def copy(self) -> "Network":
        return Network(list(self.specs), [{k: v.copy() for k, v in p.items()} for p in self.params],
                       self.input_shape, list(self.shapes), self.dtype)


def build_network(specs, seed: int, input_shape: Shape | None = None, dtype=np.float64) -> Network:
    """He-uniform weights, zero biases; identical (specs, seed) give identical buffers."""
    specs = list(specs)
    if len(specs) < 2:
        raise ValueError(f"network needs at least 2 layers (got {len(specs)}); "
                         "the classifier alone is not a valid network")
    if specs[-1].kind != "dense":
        raise ValueError(f"final layer must be a dense classifier, got {specs[-1]}")
    if input_shape is None:
        if specs[0].kind != "dense":
            raise ValueError("input_shape is required unless the first layer is dense")
        input_shape = (specs[0].args[0],)
    input_shape = tuple(int(s) for s in input_shape)

    shapes = [input_shape]
    for i, spec in enumerate(specs):
        try:
            shapes.append(_out_shape(spec, shapes[-1]))
        except ShapeError as exc:
            prev = f"layer {i - 1} ({specs[i - 1]})" if i else "the network input"
            raise ShapeError(f"layer {i} ({spec}) is incompatible with {prev}: {exc}") from None

    dtype = np.dtype(dtype)
    children = np.random.SeedSequence(int(seed) & (2**64 - 1)).spawn(len(specs))
    params = []
    for spec, ss in zip(specs, children):
        rng = np.random.default_rng(spec.seed if spec.seed is not None else ss)
        if spec.kind == "dense":
            n_in, n_out = spec.args
            lim = np.sqrt(6.0 / n_in)
            params.append({"W": rng.uniform(-lim, lim, (n_in, n_out)).astype(dtype),
                           "b": np.zeros(n_out, dtype)})
        elif spec.kind == "conv2d":
            c_in, c_out, kh, kw = spec.args[:4]
            lim = np.sqrt(6.0 / (c_in * kh * kw))
            params.append({"W": rng.uniform(-lim, lim, (c_out, c_in, kh, kw)).astype(dtype),
                           "b": np.zeros(c_out, dtype)})
        else:
            params.append({})
    return Network(specs, params, input_shape, shapes, dtype)


# --- cost model -----------------------------------------------------------

@dataclass(frozen=True)
class LayerProfile:
    ff_per_sample: int
    bf_per_sample: int
    param_count: int


def _profile(spec: LayerSpec, in_shape: Shape, out_shape: Shape) -> LayerProfile:
    if spec.kind == "dense":
        n_in, n_out = spec.args
        return LayerProfile((2 * n_in + 1) * n_out, 4 * n_in * n_out + n_out, n_in * n_out + n_out)
    if spec.kind == "conv2d":
        c_in, c_out, kh, kw = spec.args[:4]
        positions = out_shape[1] * out_shape[2]
        macs = c_in * kh * kw * c_out * positions
        return LayerProfile(2 * macs + c_out * positions, 4 * macs + c_out * positions,
                            c_out * c_in * kh * kw + c_out)
    if spec.kind in ("relu", "maxpool2d"):
        n = int(np.prod(in_shape))
        return LayerProfile(n, n, 0)
    return LayerProfile(0, 0, 0)


def profile_layers(net: Network, input_shape: Shape | None = None) -> list[LayerProfile]:
    if input_shape is not None and tuple(input_shape) != net.input_shape:
        raise ShapeError(f"input shape {tuple(input_shape)} does not match network input {net.input_shape}")
    return [_profile(s, net.shapes[i], net.shapes[i + 1]) for i, s in enumerate(net.specs)]


# --- conv helpers -----------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B, Ho*Wo, C*kh*kw)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]                      # (B, C, Ho, Wo, kh, kw)
    b, c, ho, wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b, ho * wo, c * kh * kw)


def _col2im(cols: np.ndarray, x_shape, kh, kw, stride, pad, ho, wo) -> np.ndarray:
    b, c, h, w = x_shape
    cols = cols.reshape(b, ho, wo, c, kh, kw)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out


# --- forward / loss / backward -----------------------------------------------

@dataclass
class ForwardTrace:
    inputs: list[np.ndarray]     # inputs[i] is the input activation of layer i
    caches: list[object]
    logits: np.ndarray

    @property
    def x_L(self) -> np.ndarray:
        return self.inputs[-1]


def _layer_forward(spec: LayerSpec, p: dict, x: np.ndarray):
    if spec.kind == "dense":
        return x @ p["W"] + p["b"], None
    if spec.kind == "conv2d":
        c_in, c_out, kh, kw, stride, pad = spec.args
        cols = _im2col(x, kh, kw, stride, pad)
        ho = (x.shape[2] + 2 * pad - kh) // stride + 1
        wo = (x.shape[3] + 2 * pad - kw) // stride + 1
        y = cols @ p["W"].reshape(c_out, -1).T + p["b"]
        return y.transpose(0, 2, 1).reshape(x.shape[0], c_out, ho, wo), cols
    if spec.kind == "relu":
        return np.maximum(x, 0), None
    if spec.kind == "maxpool2d":
        k, stride = spec.args
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        flat = win.reshape(*win.shape[:4], k * k)
        arg = flat.argmax(axis=-1)
        return np.take_along_axis(flat, arg[..., None], -1)[..., 0], arg
    if spec.kind == "flatten":
        return x.reshape(x.shape[0], -1), None
    raise ShapeError(spec.kind)


def forward(net: Network, batch: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(batch, dtype=net.dtype)
    if x.ndim < 2 or x.shape[0] < 1 or x.shape[1:] != net.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match (B, *{net.input_shape})")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in network input")
    inputs, caches = [], []
    for spec, p in zip(net.specs, net.params):
        inputs.append(x)
        x, cache = _layer_forward(spec, p, x)
        caches.append(cache)
    return x, ForwardTrace(inputs, caches, x)


def loss_grad(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient ``(softmax - onehot) / B``."""
    labels = np.asarray(labels)
    b, k = logits.shape
    if labels.shape != (b,) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must be {b} integers in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(b)
    loss = float(np.mean(logsum - z[rows, labels]))
    d = np.exp(z - logsum[:, None])
    d[rows, labels] -= 1.0
    return loss, d / b


@dataclass
class ParamSubset:
    """Flat parameter indices (layers in order, W then b, C-order) for SAR."""
    indices: np.ndarray
    layer: np.ndarray            # owning layer of each index
    name: np.ndarray             # "W" or "b"
    local: np.ndarray            # flat position inside that array

    def __len__(self) -> int:
        return len(self.indices)


def locate_params(net: Network, flat_indices) -> ParamSubset:
    flat_indices = np.sort(np.asarray(flat_indices, dtype=np.int64))
    bounds = []
    start = 0
    for i, p in enumerate(net.params):
        for name in ("W", "b"):
            if name in p:
                bounds.append((start, start + p[name].size, i, name))
                start += p[name].size
    if len(flat_indices) and (flat_indices[0] < 0 or flat_indices[-1] >= start):
        raise IndexError("parameter index out of range")
    if len(np.unique(flat_indices)) != len(flat_indices):
        raise ValueError("parameter indices must be distinct")
    layer, name, local = [], [], []
    for idx in flat_indices:
        for lo, hi, i, nm in bounds:
            if lo <= idx < hi:
                layer.append(i)
                name.append(nm)
                local.append(idx - lo)
                break
    return ParamSubset(flat_indices, np.array(layer, dtype=np.int64),
                       np.array(name, dtype="<U1"), np.array(local, dtype=np.int64))


@dataclass
class GradientRecord:
    param_grads: dict[int, dict[str, np.ndarray]]
    g_xL: np.ndarray
    freeze_depth: int
    subset_grads: np.ndarray | None = None     # (B, k) per-sample gradient entries
    subset_active: np.ndarray | None = None    # positions into the subset that were computed
    per_sample_sq: dict[int, float] | None = None


def _per_sample_subset(spec, p, x, dy, cache, names, local, dtype):
    """Per-sample gradient entries for the selected coordinates of one layer."""
    out = np.empty((x.shape[0], len(local)), dtype)
    if spec.kind == "dense":
        n_out = spec.args[1]
        for j, (nm, loc) in enumerate(zip(names, local)):
            if nm == "W":
                a, c = divmod(int(loc), n_out)
                out[:, j] = x[:, a] * dy[:, c]
            else:
                out[:, j] = dy[:, loc]
    else:
        c_out = spec.args[1]
        dyr = dy.reshape(dy.shape[0], c_out, -1)            # (B, C_out, P)
        k_size = cache.shape[2]
        for j, (nm, loc) in enumerate(zip(names, local)):
            if nm == "W":
                c, k = divmod(int(loc), k_size)
                out[:, j] = np.einsum("bp,bp->b", cache[:, :, k], dyr[:, c, :])
            else:
                out[:, j] = dyr[:, loc, :].sum(axis=1)
    return out


def _per_sample_sqnorm(spec, x, dy, cache) -> np.ndarray:
    """Squared norm of each sample's parameter gradient (of the summed loss)."""
    if spec.kind == "dense":
        return (x * x).sum(1) * (dy * dy).sum(1) + (dy * dy).sum(1)
    c_out = spec.args[1]
    dyr = dy.reshape(dy.shape[0], c_out, -1)
    gw = np.einsum("bpk,bcp->bck", cache, dyr)
    return (gw * gw).sum((1, 2)) + (dyr.sum(2) ** 2).sum(1)


def backward(net: Network, trace: ForwardTrace, dlogits: np.ndarray, freeze_depth: int,
             subset: ParamSubset | None = None, per_sample_fisher: bool = False) -> GradientRecord:
    """Backprop from the logits down to layer ``freeze_depth``; nothing below it runs."""
    n_layers = net.n_layers
    if not 0 <= freeze_depth <= n_layers:
        raise ValueError(f"freeze depth {freeze_depth} outside [0, {n_layers}]")
    bsz = dlogits.shape[0]
    g_xL = dlogits @ net.params[-1]["W"].T
    grads: dict[int, dict[str, np.ndarray]] = {}
    sub_cols, sub_pos = [], []
    sq: dict[int, float] | None = {} if per_sample_fisher else None

    dy = dlogits
    for i in range(n_layers - 1, freeze_depth - 1, -1):
        spec, p, x, cache = net.specs[i], net.params[i], trace.inputs[i], trace.caches[i]
        need_dx = i > freeze_depth
        dx = None
        if spec.kind == "dense":
            grads[i] = {"W": x.T @ dy, "b": dy.sum(axis=0)}
            if need_dx:
                dx = g_xL if i == n_layers - 1 else dy @ p["W"].T
        elif spec.kind == "conv2d":
            c_in, c_out, kh, kw, stride, pad = spec.args
            dyr = dy.reshape(bsz, c_out, -1).transpose(0, 2, 1)        # (B, P, C_out)
            wmat = p["W"].reshape(c_out, -1)
            gw = np.tensordot(dyr, cache, axes=([0, 1], [0, 1]))        # (C_out, K)
            grads[i] = {"W": gw.reshape(p["W"].shape), "b": dyr.sum(axis=(0, 1))}
            if need_dx:
                dx = _col2im(dyr @ wmat, x.shape, kh, kw, stride, pad, dy.shape[2], dy.shape[3])
        elif need_dx:
            if spec.kind == "relu":
                dx = dy * (x > 0)
            elif spec.kind == "maxpool2d":
                k, stride = spec.args
                bb, cc, ho, wo = dy.shape
                dx = np.zeros_like(x)
                ki, kj = np.divmod(cache, k)
                ii = np.arange(ho)[None, None, :, None] * stride + ki
                jj = np.arange(wo)[None, None, None, :] * stride + kj
                bi = np.arange(bb)[:, None, None, None]
                ci = np.arange(cc)[None, :, None, None]
                np.add.at(dx, (bi, ci, ii, jj), dy)
            elif spec.kind == "flatten":
                dx = dy.reshape(x.shape)

        if spec.parametric:
            if subset is not None:
                sel = np.nonzero(subset.layer == i)[0]
                if len(sel):
                    sub_cols.append(_per_sample_subset(spec, p, x, dy, cache, subset.name[sel],
                                                       subset.local[sel], net.dtype))
                    sub_pos.append(sel)
            if sq is not None:
                # dy holds mean-loss deltas; rescale to per-sample losses
                sq[i] = float(_per_sample_sqnorm(spec, x, dy, cache).mean() * bsz * bsz)
        dy = dx

    subset_grads = subset_active = None
    if subset is not None:
        if sub_cols:
            order = np.concatenate(sub_pos[::-1])
            subset_grads = np.concatenate(sub_cols[::-1], axis=1)
            subset_active = order
        else:
            subset_grads = np.empty((bsz, 0), net.dtype)
            subset_active = np.empty(0, np.int64)
    return GradientRecord(grads, g_xL, freeze_depth, subset_grads, subset_active, sq)


# --- Adam ---------------------------------------------------------------------

@dataclass
class OptState:
    lr: float
    m: list[dict[str, np.ndarray]]
    v: list[dict[str, np.ndarray]]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(net: Network, lr: float = 3e-4, beta1=0.9, beta2=0.999, eps=1e-8) -> OptState:
    return OptState(lr, [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params],
                    [{k: np.zeros_like(v) for k, v in p.items()} for p in net.params],
                    0, beta1, beta2, eps)


def adam_step(net: Network, grads: GradientRecord, freeze_depth: int, opt: OptState):
    """Adam with bias correction at the global step; frozen layers and their moments are untouched."""
    for i in range(freeze_depth, net.n_layers):
        if net.params[i] and i not in grads.param_grads:
            raise ValueError(f"missing gradient for unfrozen layer {i} ({net.specs[i]})")
    opt.t += 1
    bc1 = 1.0 - opt.beta1 ** opt.t
    bc2 = 1.0 - opt.beta2 ** opt.t
    for i in range(freeze_depth, net.n_layers):
        for name, w in net.params[i].items():
            g = grads.param_grads[i][name]
            m, v = opt.m[i][name], opt.v[i][name]
            m *= opt.beta1
            m += (1.0 - opt.beta1) * g
            v *= opt.beta2
            v += (1.0 - opt.beta2) * (g * g)
            w -= opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
    return net, opt
