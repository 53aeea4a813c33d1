"""Adaptive layer freezing by information per FLOP, plus naive baseline policies."""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np


@dataclass
class FreezeState:
    trF: np.ndarray                 # EMA of per-layer Fisher trace
    gnorm_sq_ema: float = 0.0       # EMA of |dL/dx_L|^2
    t: int = 0                      # training steps taken
    period: int = 4                 # m: every m-th step trains all layers and refreshes trF
    alpha: float = 0.01

    @classmethod
    def fresh(cls, n_layers: int, period: int = 4, alpha: float = 0.01) -> "FreezeState":
        if period < 1:
            raise ValueError("fisher period must be >= 1")
        return cls(np.zeros(n_layers), 0.0, 0, period, alpha)


def update_fisher(state: FreezeState, param_grads: dict[int, dict[str, np.ndarray]],
                  parametric: list[bool], per_sample_sq: dict[int, float] | None = None) -> FreezeState:
    """trF_l <- (1-a) trF_l + a * sum(g_l^2) for every layer.

    With ``per_sample_sq`` the per-sample expectation of squared gradient
    norms replaces the squared batch-mean gradient.
    """
    a = state.alpha
    for i, has_params in enumerate(parametric):
        if not has_params:
            state.trF[i] *= 1.0 - a
            continue
        if per_sample_sq is not None:
            if i not in per_sample_sq:
                raise ValueError(f"missing per-sample Fisher term for layer {i}")
            val = per_sample_sq[i]
        else:
            if i not in param_grads:
                raise ValueError(f"missing gradient for layer {i}; Fisher refresh needs a full backward")
            val = float(sum(np.sum(g * g) for g in param_grads[i].values()))
        state.trF[i] = (1.0 - a) * state.trF[i] + a * val
    return state


def info_per_cost(trF, ff_total: float, bf) -> np.ndarray:
    """(I/C)_n for n = 0..L: unfrozen Fisher mass over the cost of one step."""
    if ff_total <= 0:
        raise ValueError("total forward FLOPs must be positive")
    trF = np.asarray(trF, dtype=np.float64)
    bf = np.asarray(bf, dtype=np.float64)
    info = np.append(np.cumsum(trF[::-1])[::-1], 0.0)
    cost = ff_total + np.append(np.cumsum(bf[::-1])[::-1], 0.0)
    return info / cost


def batch_fi_ratio(g_sq_norm: float, gnorm_sq_ema: float) -> float:
    if gnorm_sq_ema <= 0.0:
        return 1.0
    return g_sq_norm / gnorm_sq_ema


def bfc(trF, bf, rho: float, max_ic: float) -> np.ndarray:
    """Net information benefit of freezing layers 1..n, n = 0..L (BFC_0 = 0)."""
    trF = np.asarray(trF, dtype=np.float64)
    bf = np.asarray(bf, dtype=np.float64)
    saved = np.concatenate(([0.0], np.cumsum(bf)))
    lost = np.concatenate(([0.0], np.cumsum(trF)))
    return max_ic * saved - rho * lost


def argmax_last(values) -> int:
    """Argmax with ties resolved toward the larger index."""
    values = np.asarray(values)
    return int(len(values) - 1 - np.argmax(values[::-1]))


@dataclass(frozen=True)
class FreezePolicy:
    variant: str                    # adaptive | none | random | constant | linear
    n: int = 0                      # n for constant, n_max for random/linear

    def __str__(self) -> str:
        return self.variant if self.variant in ("adaptive", "none") else f"{self.variant}({self.n})"

    def validate(self, n_layers: int) -> None:
        if self.variant not in ("adaptive", "none", "random", "constant", "linear"):
            raise ValueError(f"unknown freeze policy {self.variant!r}")
        if not 0 <= self.n <= n_layers:
            raise ValueError(f"policy parameter {self.n} outside [0, {n_layers}]")


def parse_policy(text: str) -> FreezePolicy:
    m = re.fullmatch(r"\s*([a-z]+)\s*(?:\(\s*(\d+)\s*\))?\s*", text)
    if not m:
        raise ValueError(f"cannot parse freeze policy {text!r}")
    variant, arg = m.group(1), m.group(2)
    if variant in ("random", "constant", "linear") and arg is None:
        raise ValueError(f"{variant} freezing needs an argument, e.g. {variant}(8)")
    pol = FreezePolicy(variant, int(arg) if arg else 0)
    if variant not in ("adaptive", "none", "random", "constant", "linear"):
        raise ValueError(f"unknown freeze policy {variant!r}")
    return pol


@dataclass
class FreezeDecision:
    n_star: int
    fisher_step: bool
    rho: float | None = None
    max_ic: float | None = None
    bfc: np.ndarray | None = field(default=None, repr=False)


def choose_depth(state: FreezeState, policy: FreezePolicy, ff: list[int], bf: list[int],
                 g_sq_norm: float, total_steps: int, rng: np.random.Generator | None = None) -> FreezeDecision:
    """Pick n* for the current step and advance the gradient-norm EMA.

    ``ff``/``bf`` are per-layer per-sample forward/backward FLOPs. For the
    adaptive policy a step with ``t % period == 0`` returns ``fisher_step``:
    the caller must run a full backward and call :func:`update_fisher`.
    """
    n_layers = len(bf)
    policy.validate(n_layers)
    t = state.t
    dec: FreezeDecision
    if policy.variant == "adaptive":
        rho = batch_fi_ratio(g_sq_norm, state.gnorm_sq_ema)
        ic = info_per_cost(state.trF, float(sum(ff)), bf)
        max_ic = float(ic.max())
        if t % state.period == 0:
            dec = FreezeDecision(0, True, rho, max_ic)
        else:
            crit = bfc(state.trF, bf, rho, max_ic)
            dec = FreezeDecision(argmax_last(crit), False, rho, max_ic, crit)
    elif policy.variant == "none":
        dec = FreezeDecision(0, False)
    elif policy.variant == "constant":
        dec = FreezeDecision(policy.n, False)
    elif policy.variant == "random":
        if rng is None:
            raise ValueError("random freezing needs an rng")
        dec = FreezeDecision(int(rng.integers(0, policy.n + 1)), False)
    else:
        n = policy.n * t // total_steps if total_steps > 0 else policy.n
        dec = FreezeDecision(min(policy.n, n), False)
    state.gnorm_sq_ema = (1.0 - state.alpha) * state.gnorm_sq_ema + state.alpha * g_sq_norm
    state.t += 1
    return dec
