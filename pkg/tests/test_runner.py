import csv
import io
import json

import numpy as np
import pytest

from budgetcl.cli import main
from budgetcl.ledger import backward_flops
from budgetcl.runner import (RunConfig, compare, flops_report, parse_config, replay_step_log, rows_to_csv,
                             run, summary_json, write_artifacts)
from budgetcl.stream import SampleSet, write_csv, write_sds1

SMALL = dict(dataset_builtin="blobs", layers="flatten; dense(64,32); relu; dense(32,16); relu; dense(16,10)",
             memory_bytes=60_000, lr=1e-3, eval_period=200)


def cfg(**kw):
    return RunConfig(**{**SMALL, **kw})


@pytest.fixture(scope="module")
def sar_run():
    return run(cfg(retrieval="sar", freeze="adaptive", temperature=8.0, method="aL-SAR"))


def test_artifacts_byte_identical(tmp_path):
    c = cfg(retrieval="sar", freeze="adaptive", temperature=4.0)
    a = write_artifacts(run(c), tmp_path / "a")
    b = write_artifacts(run(c), tmp_path / "b")
    for k in a:
        assert a[k].read_bytes() == b[k].read_bytes(), k


def test_different_seed_differs():
    a, b = run(cfg(seed=0, retrieval="random")), run(cfg(seed=1, retrieval="random"))
    assert [r.accuracy for r in a.records] != [r.accuracy for r in b.records]


def test_replay_matches_ledger(sar_run):
    assert replay_step_log(sar_run) == sar_run.ledger["training_total"]
    assert sum(s.flops for s in sar_run.steps) == sar_run.ledger["training_total"]


def test_adaptive_full_step_every_period(sar_run):
    depths = [s.n_star for s in sar_run.steps]
    assert all(depths[i] == 0 for i in range(0, len(depths), 4))
    assert any(d > 0 for d in depths)


def test_constant_freezing_saving():
    base = run(cfg(retrieval="random", freeze="none"))
    n = 2
    frozen = run(cfg(retrieval="random", freeze=f"constant({n})"))
    assert len(base.steps) == len(frozen.steps)
    saving = sum(s.batch * sum(p.bf_per_sample for p in base.profiles[:n]) for s in base.steps)
    assert base.ledger["backward"] - frozen.ledger["backward"] == saving
    for s0, s1 in zip(base.steps, frozen.steps):
        diff = backward_flops(base.profiles, 0, s0.batch) - backward_flops(frozen.profiles, n, s1.batch)
        assert diff == s0.batch * sum(p.bf_per_sample for p in base.profiles[:n])


def test_zero_budget_is_eval_only():
    s = run(cfg(flops_cap=0))
    assert s.exhausted and not s.steps and s.ledger["training_total"] == 0
    assert len(s.records) == 1 and s.ledger["eval_flops"] > 0


def test_budget_cap_respected():
    full = run(cfg(retrieval="random", freeze="none"))
    cap = full.ledger["training_total"] // 3
    s = run(cfg(retrieval="random", freeze="none", flops_cap=cap))
    assert s.exhausted and 0 < len(s.steps) < len(full.steps)
    assert s.ledger["training_total"] <= cap


def test_eval_flops_not_in_training(sar_run):
    led = sar_run.ledger
    parts = led["forward"] + led["backward"] + led["optimizer"] + led["sar_overhead"] + led["freeze_overhead"]
    assert parts == led["training_total"] and led["eval_flops"] > 0


def test_eval_records(sar_run):
    seen = [r.samples_seen for r in sar_run.records]
    assert seen == sorted(seen) and seen[0] == 200
    assert all(0 <= r.accuracy <= 1 for r in sar_run.records)
    assert sar_run.records[-1].cum_train_flops == sar_run.ledger["training_total"]


def test_summary_json_fields(sar_run):
    row = json.loads(summary_json(sar_run))
    for k in ("method", "seed", "a_auc", "a_last", "tflops", "memory_plan"):
        assert k in row
    assert row["tflops"]["training_total"] == sar_run.ledger["training_total"] / 1e12


def test_flops_report_sums(sar_run):
    text = flops_report(json.loads(summary_json(sar_run)))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert rows[-1]["category"] == "Total"
    assert sum(int(r["flops"]) for r in rows[:-1]) == int(rows[-1]["flops"]) == sar_run.ledger["training_total"]


def test_frozen_heavy_report_shows_savings():
    s = run(cfg(retrieval="random", freeze="constant(4)"))
    rows = {r["category"]: int(r["flops"]) for r in csv.DictReader(io.StringIO(flops_report(s.result_row())))}
    assert rows["Backward FLOPs"] < 2 * rows["Forward FLOPs"]


def test_compare_single_seed_std_zero():
    rows = compare([cfg(method="vanilla", retrieval="random", freeze="none"),
                    cfg(method="sar", retrieval="sar", freeze="none", temperature=8.0)])
    means = [r for r in rows if r["seed"] == "mean"]
    assert len(means) == 2
    assert all(r["a_auc_std"] == 0.0 and r["tflops_std"] == 0.0 for r in means)
    text = rows_to_csv(rows)
    assert text.splitlines()[0].startswith("method,seed,a_auc")


def test_compare_rejects_mismatch():
    with pytest.raises(ValueError, match="dataset"):
        compare([cfg(method="a"), cfg(method="b", dataset_builtin="digits")])
    with pytest.raises(ValueError, match="schedule"):
        compare([cfg(method="a"), cfg(method="b", tasks=2)])
    with pytest.raises(ValueError, match="seeds"):
        compare([cfg(method="a"), cfg(method="b", seeds=[1])])
    with pytest.raises(ValueError):
        compare([cfg(method="a")])


def test_parse_config(tmp_path):
    text = """
    # vanilla baseline
    method = vanilla
    dataset.builtin = digits
    schedule.kind = gaussian
    schedule.sigma_frac = 0.1
    retrieval.method = random
    freeze.policy = random(2)
    budget.flops_cap = 1e9
    hp.lr = 0.001
    seeds = 0, 1, 2
    """
    c = parse_config(text)
    assert c.method == "vanilla" and c.schedule == "gaussian" and c.sigma_frac == 0.1
    assert c.flops_cap == 10**9 and c.seeds == [0, 1, 2] and c.freeze == "random(2)"
    with pytest.raises(ValueError, match="unknown key"):
        parse_config("dataset.builtin = digits\nhp.nope = 1")
    with pytest.raises(ValueError):
        parse_config("dataset.builtin = digits\nretrieval.method = mir")
    with pytest.raises(FileNotFoundError):
        parse_config("dataset.path = missing.sds1", tmp_path)


def test_gaussian_schedule_run():
    s = run(cfg(schedule="gaussian", sigma_frac=0.05, retrieval="random", freeze="random(2)"))
    assert s.steps and replay_step_log(s) == s.ledger["training_total"]


def test_file_dataset_and_cli(tmp_path, capsys):
    rng = np.random.default_rng(0)
    protos = rng.integers(0, 256, (4, 1, 4, 4))
    y = np.repeat(np.arange(4), 40)
    x = np.clip(protos[y] + rng.normal(0, 20, (160, 1, 4, 4)), 0, 255).astype(np.uint8)
    write_csv(tmp_path / "d.csv", SampleSet(x, y, 4))
    assert main(["convert-dataset", str(tmp_path / "d.csv"), str(tmp_path / "d.sds1"),
                 "--shape", "1", "4", "4", "--n-classes", "4"]) == 0
    common = ("dataset.path = d.sds1\nschedule.tasks = 2\nnetwork.layers = flatten; dense(16,8); relu; dense(8,4)\n"
              "budget.memory_bytes = 4000\nhp.eval_period = 40\nhp.lr = 0.003\n")
    (tmp_path / "a.cfg").write_text("method = vanilla\nretrieval.method = random\nfreeze.policy = none\n" + common)
    (tmp_path / "b.cfg").write_text("method = alsar\nretrieval.method = sar\nfreeze.policy = adaptive\n"
                                    "hp.temperature = 4\n" + common)
    assert main(["run", "--config", str(tmp_path / "b.cfg"), "--out", str(tmp_path / "out")]) == 0
    ev = (tmp_path / "out" / "eval.csv").read_text().splitlines()
    assert ev[0] == "samples_seen,accuracy,cum_train_tflops" and len(ev) == 1 + 128 // 40 + 1
    assert (tmp_path / "out" / "freeze_log.csv").read_text().startswith("step,n_star,rho,max_ic\n")
    assert main(["flops-report", str(tmp_path / "out" / "summary.json"), "--out", str(tmp_path / "r.csv")]) == 0
    assert (tmp_path / "r.csv").read_text().splitlines()[-1].startswith("Total,")
    assert main(["compare", "--configs", str(tmp_path / "a.cfg"), str(tmp_path / "b.cfg"),
                 "--out", str(tmp_path / "cmp.csv")]) == 0
    assert len((tmp_path / "cmp.csv").read_text().splitlines()) == 1 + 2 + 2
    capsys.readouterr()
    assert main(["run", "--config", str(tmp_path / "missing.cfg")]) == 2
    assert "error" in capsys.readouterr().err
