"""
Vanilla replay, adaptive freezing, similarity-aware retrieval, and both
======================================================================

Four runs over the same class-incremental digits stream, with equal
iteration counts.  Accuracy is the area under the online accuracy curve;
cost is every FLOP spent on training (evaluation is metered separately).
The same table comes out of::

    budgetcl compare --configs demos/configs/*.cfg --out ablation.csv
"""
from pathlib import Path

from budgetcl.runner import compare, load_config

here = Path(__file__).parent / "configs"
configs = [load_config(here / f"{name}.cfg") for name in ("vanilla", "al", "sar", "al_sar")]
rows = [r for r in compare(configs) if r["seed"] == "mean"]

###############################################################################
# Freezing saves backward passes and optimizer updates; smarter retrieval
# buys accuracy at almost no extra cost.

base = rows[0]
print(f"{'method':<8} {'A_AUC':>7} {'A_last':>7} {'GFLOPs':>8} {'vs vanilla':>10}")
for r in rows:
    print(f"{r['method']:<8} {100 * r['a_auc']:7.2f} {100 * r['a_last']:7.2f} "
          f"{1e3 * r['tflops']:8.2f} {r['tflops'] / base['tflops']:10.1%}")
