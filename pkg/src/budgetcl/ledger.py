"""Integer accounting of training FLOPs and the memory-bytes capacity plan."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

from .netcore import LayerProfile

BYTES_PER_FLOAT = 4
MIB = 2**20

TRAIN_CATEGORIES = ("forward", "backward", "optimizer", "sar_overhead", "freeze_overhead")
SAR_PARTS = ("retrieval", "freq_update", "similarity")
FREEZE_PARTS = ("fisher", "bfc")


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def adam_update_flops(param_count: int) -> int:
    if param_count < 0:
        raise ValueError("param_count must be non-negative")
    return 12 * param_count


def forward_flops(profiles: list[LayerProfile], batch: int) -> int:
    return batch * sum(p.ff_per_sample for p in profiles)


def backward_flops(profiles: list[LayerProfile], freeze_depth: int, batch: int) -> int:
    return batch * sum(p.bf_per_sample for p in profiles[freeze_depth:])


def step_flops(profiles: list[LayerProfile], freeze_depth: int, batch: int,
               updated_params: int = 0, overheads: int = 0) -> int:
    """Training cost of one step with layers ``0..freeze_depth-1`` frozen."""
    if not 0 <= freeze_depth <= len(profiles):
        raise ValueError(f"freeze depth {freeze_depth} outside [0, {len(profiles)}]")
    return (forward_flops(profiles, batch) + backward_flops(profiles, freeze_depth, batch)
            + adam_update_flops(updated_params) + overheads)


@dataclass(frozen=True)
class OverheadBreakdown:
    retrieval: int
    freq_update: int
    similarity: int
    fisher: int
    bfc: int


def sar_overhead_flops(batch: int, mem_size: int, n_classes: int, param_count: int,
                       n_layers: int, len_xL: int, subset_fraction: float = 0.0005) -> OverheadBreakdown:
    sim = (Fraction(5 * param_count) * Fraction(str(subset_fraction)) + 3) * batch
    return OverheadBreakdown(
        retrieval=4 * mem_size + n_classes**2 + n_classes,
        freq_update=2 * batch + n_classes + mem_size,
        similarity=_round_half_up(sim),
        fisher=2 * param_count + 3 * n_layers,
        bfc=3 * n_layers + 2 * len_xL,
    )


@dataclass
class BudgetLedger:
    flops_cap: int | None = None
    forward: int = 0
    backward: int = 0
    optimizer: int = 0
    sar_overhead: int = 0
    freeze_overhead: int = 0
    eval_flops: int = 0
    detail: dict[str, int] = field(default_factory=lambda: {k: 0 for k in SAR_PARTS + FREEZE_PARTS})

    @property
    def training_total(self) -> int:
        return self.forward + self.backward + self.optimizer + self.sar_overhead + self.freeze_overhead

    def charge_step(self, profiles, freeze_depth: int, batch: int, updated_params: int,
                    overhead_parts: dict[str, int] | None = None) -> int:
        """Charge one step; returns its cost (equal to ``step_flops`` with summed overheads)."""
        fwd = forward_flops(profiles, batch)
        bwd = backward_flops(profiles, freeze_depth, batch)
        opt = adam_update_flops(updated_params)
        self.forward += fwd
        self.backward += bwd
        self.optimizer += opt
        extra = 0
        for k, v in (overhead_parts or {}).items():
            if v < 0:
                raise ValueError("overheads must be non-negative")
            if k in SAR_PARTS:
                self.sar_overhead += v
            elif k in FREEZE_PARTS:
                self.freeze_overhead += v
            else:
                raise KeyError(f"unknown overhead category {k!r}")
            self.detail[k] += v
            extra += v
        return fwd + bwd + opt + extra

    def charge_eval(self, flops: int) -> None:
        self.eval_flops += flops

    def snapshot(self) -> dict:
        out = {k: getattr(self, k) for k in TRAIN_CATEGORIES}
        out["training_total"] = self.training_total
        out["eval_flops"] = self.eval_flops
        out["flops_cap"] = self.flops_cap
        out["detail"] = dict(self.detail)
        return out


@dataclass(frozen=True)
class BudgetStatus:
    remaining: float        # math.inf when no cap is set
    exhausted: bool


def check_budget(ledger: BudgetLedger, next_step: int = 0) -> BudgetStatus:
    """Pre-step check: exhausted if the next step could not complete within the cap."""
    if ledger.flops_cap is None:
        return BudgetStatus(math.inf, False)
    remaining = ledger.flops_cap - ledger.training_total
    return BudgetStatus(remaining, remaining <= 0 or next_step > remaining)


@dataclass(frozen=True)
class MemoryPlan:
    budget_bytes: int
    model_bytes: int
    aux_bytes: int
    sample_bytes: int
    capacity: int

    def used_bytes(self) -> int:
        return self.capacity * self.sample_bytes + self.model_bytes + self.aux_bytes

    def to_dict(self) -> dict:
        return asdict(self)


def memory_capacity(budget_bytes: int, model_copies: int, param_count: int,
                    aux_bytes: int, sample_bytes: int) -> int:
    fixed = model_copies * BYTES_PER_FLOAT * param_count + aux_bytes
    if sample_bytes <= 0:
        raise ValueError("sample_bytes must be positive")
    if budget_bytes < fixed:
        raise ValueError(f"budget of {budget_bytes} B does not cover model and auxiliary state ({fixed} B)")
    return (budget_bytes - fixed) // sample_bytes


def plan_memory(budget_bytes: int, param_count: int, sample_bytes: int,
                model_copies: int = 1, aux_bytes: int = 0) -> MemoryPlan:
    cap = memory_capacity(budget_bytes, model_copies, param_count, aux_bytes, sample_bytes)
    return MemoryPlan(budget_bytes, model_copies * BYTES_PER_FLOAT * param_count, aux_bytes, sample_bytes, cap)


def mib(x: float) -> int:
    """Megabytes as used in the budget tables (MiB) to whole bytes."""
    return int(round(x * MIB))
