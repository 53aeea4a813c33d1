"""Experiment orchestration: the per-sample training loop, artifacts and comparisons."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datasets
from .freezing import FreezeState, choose_depth, parse_policy, update_fisher
from .ledger import (BYTES_PER_FLOAT, FREEZE_PARTS, SAR_PARTS, BudgetLedger, check_budget,
                     plan_memory, sar_overhead_flops, step_flops)
from .memory import MemoryStore
from .netcore import (adam_step, backward, build_network, forward, init_adam, locate_params,
                      loss_grad, parse_layers, profile_layers)
from .retrieval import (decay_rate, draw_batch, effective_use_frequency, retrieval_probs,
                        select_param_subset, update_similarity)
from .stream import (Dataset, EvalRecord, a_auc, a_last, disjoint_schedule, evaluate,
                     gaussian_schedule, load_dataset, split_stratified)

log = logging.getLogger(__name__)

RETRIEVALS = ("random", "frequency", "discounted", "sar")
RNG_STREAMS = ("init", "memory", "retrieval", "schedule", "policy", "subset")


@dataclass
class RunConfig:
    method: str = "run"
    dataset_path: str | None = None
    dataset_format: str | None = None
    dataset_test_path: str | None = None
    dataset_builtin: str | None = None          # "digits" or "blobs" instead of a file
    test_fraction: float = 0.2
    split_seed: int = 0
    schedule: str = "disjoint"
    tasks: int = 5
    sigma_frac: float = 0.05
    layers: str = "flatten; dense(64,64); relu; dense(64,10)"
    retrieval: str = "sar"
    freeze: str = "adaptive"
    fisher_mode: str = "batch"                  # "batch" or "per_sample"
    flops_cap: int | None = None
    memory_bytes: int = 8_000_000
    temperature: float = 0.125
    k: float = 4.0
    alpha: float = 0.01
    period: int = 4
    batch_size: int = 16
    lr: float = 3e-4
    iters_per_sample: float = 1.0
    subset_fraction: float = 0.0005
    eval_period: int = 100
    precision: int = 32
    seed: int = 0
    seeds: list[int] = field(default_factory=lambda: [0])

    def validate(self) -> None:
        if self.retrieval not in RETRIEVALS:
            raise ValueError(f"retrieval must be one of {RETRIEVALS}")
        if self.schedule not in ("disjoint", "gaussian"):
            raise ValueError("schedule must be disjoint or gaussian")
        if self.fisher_mode not in ("batch", "per_sample"):
            raise ValueError("fisher_mode must be batch or per_sample")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.temperature <= 0 or self.k < 1 or not 0 < self.alpha <= 1:
            raise ValueError("need temperature > 0, k >= 1, 0 < alpha <= 1")
        if self.batch_size < 1 or self.period < 1 or self.eval_period < 1:
            raise ValueError("batch_size, period and eval_period must be positive")
        if self.iters_per_sample < 0 or self.lr <= 0 or not 0 < self.subset_fraction <= 1:
            raise ValueError("invalid iters_per_sample, lr or subset_fraction")
        if self.flops_cap is not None and self.flops_cap < 0:
            raise ValueError("flops_cap must be non-negative")
        if self.dataset_builtin is None and self.dataset_path is None:
            raise ValueError("config names no dataset")
        for p in (self.dataset_path, self.dataset_test_path):
            if p is not None and not Path(p).exists():
                raise FileNotFoundError(p)
        parse_policy(self.freeze)
        parse_layers(self.layers)

    def dataset_key(self) -> tuple:
        return (self.dataset_path, self.dataset_format, self.dataset_test_path, self.dataset_builtin,
                self.test_fraction, self.split_seed)

    def schedule_key(self) -> tuple:
        return (self.schedule, self.tasks if self.schedule == "disjoint" else self.sigma_frac)


# dotted config keys -> RunConfig fields
CONFIG_KEYS = {
    "method": "method", "seed": "seed", "seeds": "seeds",
    "dataset.path": "dataset_path", "dataset.format": "dataset_format",
    "dataset.test_path": "dataset_test_path", "dataset.builtin": "dataset_builtin",
    "dataset.test_fraction": "test_fraction", "dataset.split_seed": "split_seed",
    "schedule.kind": "schedule", "schedule.tasks": "tasks", "schedule.sigma_frac": "sigma_frac",
    "network.layers": "layers", "retrieval.method": "retrieval",
    "freeze.policy": "freeze", "freeze.period": "period", "freeze.fisher_mode": "fisher_mode",
    "budget.flops_cap": "flops_cap", "budget.memory_bytes": "memory_bytes",
    "hp.temperature": "temperature", "hp.k": "k", "hp.alpha": "alpha", "hp.batch_size": "batch_size",
    "hp.lr": "lr", "hp.iters_per_sample": "iters_per_sample", "hp.subset_fraction": "subset_fraction",
    "hp.eval_period": "eval_period", "hp.precision": "precision",
}
_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    typ = _FIELD_TYPES[name]
    raw = raw.strip()
    if name == "seeds":
        return [int(s) for s in raw.replace(",", " ").split()]
    if raw.lower() in ("", "none") and "None" in typ:
        return None
    if typ.startswith("int"):
        return int(float(raw)) if "e" in raw.lower() else int(raw)
    if typ.startswith("float"):
        return float(raw)
    return raw


def parse_config(text: str, base_dir: str | Path | None = None) -> RunConfig:
    """Flat ``key = value`` lines, ``#`` comments, dotted names."""
    cfg = RunConfig()
    seen_seeds = False
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        name = CONFIG_KEYS[key]
        val = _coerce(name, value)
        if name in ("dataset_path", "dataset_test_path") and val and base_dir is not None:
            p = Path(val)
            val = str(p if p.is_absolute() else Path(base_dir) / p)
        setattr(cfg, name, val)
        seen_seeds |= name == "seeds"
    if not seen_seeds:
        cfg.seeds = [cfg.seed]
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), path.parent)


def prepare_dataset(cfg: RunConfig) -> Dataset:
    if cfg.dataset_builtin is not None:
        if cfg.dataset_builtin == "digits":
            s = datasets.digits()
        elif cfg.dataset_builtin == "blobs":
            s = datasets.blobs(seed=cfg.split_seed)
        else:
            raise ValueError(f"unknown builtin dataset {cfg.dataset_builtin!r}")
        return split_stratified(s, cfg.test_fraction, cfg.split_seed)
    return load_dataset(cfg.dataset_path, cfg.dataset_format, cfg.dataset_test_path,
                        cfg.test_fraction, cfg.split_seed)


# --- results --------------------------------------------------------------------

@dataclass(frozen=True)
class StepRecord:
    step: int
    samples_seen: int
    batch: int
    n_star: int
    updated_params: int
    overhead: int
    flops: int


@dataclass
class RunSummary:
    method: str
    seed: int
    a_auc: float
    a_last: float
    ledger: dict
    memory_plan: dict
    exhausted: bool
    records: list[EvalRecord]
    freeze_log: list[tuple]
    steps: list[StepRecord]
    profiles: list = field(default_factory=list)

    def tflops(self) -> dict[str, float]:
        keys = ("forward", "backward", "optimizer", "sar_overhead", "freeze_overhead", "training_total")
        return {k: self.ledger[k] / 1e12 for k in keys}

    def result_row(self) -> dict:
        return {"method": self.method, "seed": self.seed, "a_auc": self.a_auc, "a_last": self.a_last,
                "tflops": self.tflops(), "flops": self.ledger, "memory_plan": self.memory_plan,
                "exhausted": self.exhausted, "train_steps": len(self.steps)}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def eval_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["samples_seen", "accuracy", "cum_train_tflops"])
    for r in summary.records:
        w.writerow([r.samples_seen, _fmt(r.accuracy), _fmt(r.cum_train_flops / 1e12)])
    return buf.getvalue()


def freeze_log_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "n_star", "rho", "max_ic"])
    for row in summary.freeze_log:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def steps_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "samples_seen", "batch", "n_star", "updated_params", "overhead", "flops"])
    for s in summary.steps:
        w.writerow(list(asdict(s).values()))
    return buf.getvalue()


def summary_json(summary: RunSummary) -> str:
    row = summary.result_row()
    row["layer_profiles"] = [asdict(p) for p in summary.profiles]
    return json.dumps(row, indent=2, sort_keys=True) + "\n"


def write_artifacts(summary: RunSummary, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"eval": out / "eval.csv", "freeze_log": out / "freeze_log.csv",
             "steps": out / "steps.csv", "summary": out / "summary.json"}
    files["eval"].write_text(eval_csv(summary))
    files["freeze_log"].write_text(freeze_log_csv(summary))
    files["steps"].write_text(steps_csv(summary))
    files["summary"].write_text(summary_json(summary))
    return files


# --- the loop ---------------------------------------------------------------------

def _aux_bytes(cfg: RunConfig, n_classes: int, n_layers: int, subset: int) -> tuple[int, int]:
    """(aux bytes, extra bytes per stored sample) of method state kept alongside the memory."""
    aux, per_sample = 0, 0
    if cfg.retrieval != "random":
        aux += BYTES_PER_FLOAT * n_classes              # C_y
        per_sample += BYTES_PER_FLOAT                   # c_i
    if cfg.retrieval == "sar":
        aux += BYTES_PER_FLOAT * (n_classes * n_classes) + 8 * subset
    if parse_policy(cfg.freeze).variant == "adaptive":
        aux += BYTES_PER_FLOAT * (n_layers + 1)
    return aux, per_sample


def run(cfg: RunConfig, dataset: Dataset | None = None, out_dir=None) -> RunSummary:
    """Train one method over one stream; the per-step order follows the reference loop:
    insert -> retrieval probabilities -> draw -> decay -> bump -> forward ->
    freeze decision -> partial backward -> similarity/Fisher updates -> Adam -> ledger."""
    cfg.validate()
    ds = dataset if dataset is not None else prepare_dataset(cfg)
    streams = dict(zip(RNG_STREAMS, np.random.SeedSequence(int(cfg.seed) & (2**64 - 1)).spawn(len(RNG_STREAMS))))
    rngs = {k: np.random.default_rng(v) for k, v in streams.items()}

    sched_seed = int(rngs["schedule"].integers(2**63))
    if cfg.schedule == "disjoint":
        sched = disjoint_schedule(ds.train_y, ds.n_classes, cfg.tasks, sched_seed)
    else:
        sched = gaussian_schedule(ds.train_y, ds.n_classes, cfg.sigma_frac, sched_seed)

    dtype = np.float32 if cfg.precision == 32 else np.float64
    net = build_network(parse_layers(cfg.layers), int(rngs["init"].integers(2**63)),
                        ds.sample_shape, dtype)
    if net.n_classes != ds.n_classes:
        raise ValueError(f"network emits {net.n_classes} logits for {ds.n_classes} classes")
    profiles = profile_layers(net)
    ff = [p.ff_per_sample for p in profiles]
    bf = [p.bf_per_sample for p in profiles]
    n_layers, n_params, K = net.n_layers, net.param_count, ds.n_classes
    parametric = [s.parametric for s in net.specs]
    layer_params = [net.layer_param_count(i) for i in range(n_layers)]
    unfrozen_params = np.cumsum(layer_params[::-1])[::-1].tolist() + [0]

    policy = parse_policy(cfg.freeze)
    policy.validate(n_layers)
    use_sar = cfg.retrieval == "sar"
    subset = None
    if use_sar:
        subset = locate_params(net, select_param_subset(n_params, rngs["subset"], cfg.subset_fraction))
    aux, per_sample = _aux_bytes(cfg, K, n_layers, len(subset) if subset is not None else 0)
    plan = plan_memory(cfg.memory_bytes, n_params, ds.sample_bytes + per_sample, 1, aux)
    if plan.capacity < 1:
        raise ValueError(f"memory budget leaves room for {plan.capacity} samples")
    mem = MemoryStore(plan.capacity, ds.sample_shape, K)
    opt = init_adam(net, cfg.lr)
    fstate = FreezeState.fresh(n_layers, cfg.period, cfg.alpha)
    S = np.zeros((K, K))
    ledger = BudgetLedger(cfg.flops_cap)

    whole, frac = int(math.floor(cfg.iters_per_sample)), cfg.iters_per_sample - math.floor(cfg.iters_per_sample)
    total_steps = int(round(len(sched) * cfg.iters_per_sample))
    records: list[EvalRecord] = []
    freeze_log: list[tuple] = []
    steps: list[StepRecord] = []
    exhausted = False

    def overhead_parts(bsz: int, m: int, fisher_step: bool) -> dict[str, int]:
        o = sar_overhead_flops(bsz, m, K, n_params, n_layers, net.feature_dim, cfg.subset_fraction)
        parts = {}
        if cfg.retrieval != "random":
            parts["retrieval"] = o.retrieval
            parts["freq_update"] = o.freq_update
        if use_sar:
            parts["similarity"] = o.similarity
        if policy.variant == "adaptive":
            parts["fisher" if fisher_step else "bfc"] = o.fisher if fisher_step else o.bfc
        return parts

    def train_step(samples_seen: int) -> None:
        m = len(mem)
        bsz = min(cfg.batch_size, m)
        if cfg.retrieval == "random":
            idx = np.sort(rngs["retrieval"].choice(m, size=bsz, replace=False))
        else:
            if use_sar:
                c_hat = effective_use_frequency(mem.c[:m], mem.labels[:m], S, mem.C)
            else:
                c_hat = mem.c[:m]
            idx = draw_batch(retrieval_probs(c_hat, cfg.temperature), bsz, rngs["retrieval"])
            if cfg.retrieval != "frequency":
                mem.decay_all(decay_rate(bsz, cfg.k, m))
            mem.bump(idx)
        x, y = mem.batch(idx, dtype=dtype)
        logits, trace = forward(net, x)
        _, dlogits = loss_grad(logits, y)
        g_xL = dlogits @ net.params[-1]["W"].T
        g_sq = float(np.sum(g_xL.astype(np.float64) ** 2))
        dec = choose_depth(fstate, policy, ff, bf, g_sq, total_steps, rngs["policy"])
        n = dec.n_star
        grads = backward(net, trace, dlogits, n, subset=subset,
                         per_sample_fisher=dec.fisher_step and cfg.fisher_mode == "per_sample")
        if dec.fisher_step:
            update_fisher(fstate, grads.param_grads, parametric,
                          grads.per_sample_sq if cfg.fisher_mode == "per_sample" else None)
        if use_sar and grads.subset_grads.shape[1]:
            update_similarity(S, grads.subset_grads, y, cfg.alpha)
        adam_step(net, grads, n, opt)
        parts = overhead_parts(bsz, m, dec.fisher_step)
        cost = ledger.charge_step(profiles, n, bsz, unfrozen_params[n], parts)
        steps.append(StepRecord(len(steps), samples_seen, bsz, n, unfrozen_params[n],
                                sum(parts.values()), cost))
        freeze_log.append((len(freeze_log), n, dec.rho, dec.max_ic))

    def record(samples_seen: int, pos: int) -> None:
        acc = evaluate(net, ds.test_x, ds.test_y, sched.seen_at(pos), ledger)
        records.append(EvalRecord(samples_seen, acc, ledger.training_total))

    for pos, tid in enumerate(sched.order):
        mem.insert(ds.train_x[tid], ds.train_y[tid], rngs["memory"])
        samples_seen = pos + 1
        n_iter = whole + (1 if frac > 0 and rngs["schedule"].random() < frac else 0)
        for _ in range(n_iter):
            bsz = min(cfg.batch_size, len(mem))
            bound = step_flops(profiles, 0, bsz, n_params, sum(overhead_parts(bsz, len(mem), True).values())
                               + sum(overhead_parts(bsz, len(mem), False).values()))
            if check_budget(ledger, bound).exhausted:
                exhausted = True
                break
            train_step(samples_seen)
        if exhausted:
            record(samples_seen, pos)
            log.info("%s: FLOPs budget exhausted after %d steps", cfg.method, len(steps))
            break
        if samples_seen % cfg.eval_period == 0 or samples_seen == len(sched):
            record(samples_seen, pos)

    summary = RunSummary(cfg.method, cfg.seed, a_auc(records), a_last(records), ledger.snapshot(),
                         plan.to_dict(), exhausted, records, freeze_log, steps, profiles)
    if out_dir is not None:
        write_artifacts(summary, out_dir)
    return summary


def replay_step_log(summary: RunSummary) -> int:
    """Recompute total training FLOPs from the step log alone."""
    return sum(step_flops(summary.profiles, s.n_star, s.batch, s.updated_params, s.overhead)
               for s in summary.steps)


# --- comparisons ------------------------------------------------------------------

def _run_seed(args) -> dict:
    cfg, seed = args
    c = RunConfig(**{**asdict(cfg), "seed": seed, "seeds": [seed]})
    return run(c).result_row()


def compare(configs: list[RunConfig], jobs: int = 1) -> list[dict]:
    """One row per (method, seed), then a mean row per method carrying population-std columns."""
    if len(configs) < 2:
        raise ValueError("compare needs at least two configs")
    if len({c.method for c in configs}) != len(configs):
        raise ValueError("compare needs a distinct method label per config")
    ref = configs[0]
    for c in configs[1:]:
        if c.dataset_key() != ref.dataset_key():
            raise ValueError(f"config {c.method!r} uses a different dataset than {ref.method!r}")
        if c.schedule_key() != ref.schedule_key():
            raise ValueError(f"config {c.method!r} uses a different schedule than {ref.method!r}")
        if list(c.seeds) != list(ref.seeds):
            raise ValueError(f"config {c.method!r} uses different seeds than {ref.method!r}")
    jobs_list = [(c, s) for c in configs for s in c.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_run_seed, jobs_list))
    else:
        results = [_run_seed(j) for j in jobs_list]

    rows = []
    for r in results:
        t = r["tflops"]
        rows.append({"method": r["method"], "seed": str(r["seed"]), "a_auc": r["a_auc"], "a_last": r["a_last"],
                     "tflops": t["training_total"], "tflops_forward": t["forward"],
                     "tflops_backward": t["backward"], "tflops_optimizer": t["optimizer"],
                     "tflops_sar": t["sar_overhead"], "tflops_freeze": t["freeze_overhead"],
                     "memory_capacity": r["memory_plan"]["capacity"]})
    numeric = [k for k in rows[0] if k not in ("method", "seed")]
    std_cols = [f"{k}_std" for k in numeric]
    out = [{**r, **dict.fromkeys(std_cols)} for r in rows]
    for c in configs:
        mine = [r for r in rows if r["method"] == c.method]
        agg = {"method": c.method, "seed": "mean"}
        agg.update({k: float(np.mean([r[k] for r in mine])) for k in numeric})
        agg.update({f"{k}_std": float(np.std([r[k] for r in mine])) for k in numeric})
        out.append(agg)
    return out


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(v) for k, v in r.items()})
    return buf.getvalue()


REPORT_ROWS = (
    ("forward", "Forward FLOPs", "B x sum_i FF_i per step"),
    ("backward", "Backward FLOPs", "B x sum_{i>n} BF_i per step"),
    ("optimizer", "Model updates (Adam)", "12 x (# updated parameters)"),
    ("similarity", "Class-wise similarity", "(5 x (# parameters) x subset_fraction + 3) x B"),
    ("fisher", "Fisher information", "2 x (# parameters) + 3 x (# layers)"),
    ("bfc", "BFC", "3 x (# layers) + 2 x len(x_L)"),
    ("retrieval", "Retrieval probability", "4 x |M| + (# classes)^2 + (# classes)"),
    ("freq_update", "Frequency update", "2 x B + (# classes) + |M|"),
)


def flops_report(summary: dict) -> str:
    """Table-style CSV breakdown (category, formula, flops, tflops) from a summary dict."""
    flops = summary["flops"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["category", "formula", "flops", "tflops"])
    total = 0
    for key, label, formula in REPORT_ROWS:
        v = flops[key] if key in ("forward", "backward", "optimizer") else flops["detail"][key]
        total += v
        w.writerow([label, formula, v, repr(v / 1e12)])
    if total != flops["training_total"]:
        raise ValueError("ledger categories do not sum to the training total")
    w.writerow(["Total", "sum of the above", total, repr(total / 1e12)])
    return buf.getvalue()
