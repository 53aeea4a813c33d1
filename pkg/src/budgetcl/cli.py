"""Command line entry points: run, compare, convert-dataset, flops-report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .runner import compare, flops_report, load_config, rows_to_csv, run
from .stream import convert_dataset


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out) if args.out else Path(args.config).with_suffix("")
    summary = run(cfg, out_dir=out)
    print(f"{summary.method} seed={summary.seed} A_AUC={summary.a_auc:.4f} A_last={summary.a_last:.4f} "
          f"TFLOPs={summary.ledger['training_total'] / 1e12:.6g} exhausted={summary.exhausted}")
    print(f"artifacts in {out}")
    return 0


def _cmd_compare(args) -> int:
    rows = compare([load_config(p) for p in args.configs], jobs=args.jobs)
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_convert(args) -> int:
    s = convert_dataset(args.input, args.output, tuple(args.shape) if args.shape else None, args.n_classes)
    print(f"wrote {len(s)} samples of shape {s.sample_shape} ({s.n_classes} classes) to {args.output}")
    return 0


def _cmd_report(args) -> int:
    summary = json.loads(Path(args.summary).read_text())
    text = flops_report(summary)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="budgetcl", description="Budget-accounted online continual learning")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run one config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="artifact directory (default: config path without suffix)")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("compare", help="run several configs over their seeds and tabulate")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("convert-dataset", help="convert label,p0,p1,... CSV to SDS1")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--shape", type=int, nargs=3, metavar=("C", "H", "W"))
    p.add_argument("--n-classes", type=int)
    p.set_defaults(fn=_cmd_convert)

    p = sub.add_parser("flops-report", help="FLOPs breakdown CSV from a summary.json")
    p.add_argument("summary")
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_report)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.fn(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
