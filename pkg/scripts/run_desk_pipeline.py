#!/usr/bin/env python3
"""Run the whole staging pipeline at desk scale and print the headlines.

Equivalent to calling the six CLI stages by hand with desk_config.json:
5 PPS + 2 control subjects, 600 s per phase, Proposed4, leave-one-subject-out.
Takes roughly 20-25 minutes on one desktop core.
"""

import argparse
import csv
import subprocess
import sys
import time
from pathlib import Path

STAGES = ("generate", "preprocess", "train", "evaluate", "cam", "report")
HERE = Path(__file__).parent


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--run", default="runs/desk", help="run directory (default runs/desk)")
    ap.add_argument("--config", default=str(HERE / "desk_config.json"))
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = ap.parse_args()

    t0 = time.perf_counter()
    for stage in STAGES:
        argv = [sys.executable, "-m", "epgstage.cli", stage,
                "--run", args.run, "--config", args.config]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        t = time.perf_counter()
        code = subprocess.call(argv)
        if code != 0:
            print(f"{stage} failed with exit code {code}", file=sys.stderr)
            return code
        print(f"[{stage}] {time.perf_counter() - t:.0f}s")
    total = time.perf_counter() - t0

    run = Path(args.run)
    summary = {r["class"]: r for r in read_rows(run / "eval" / "metrics_summary.csv")}
    control = {r["class"]: r for r in read_rows(run / "eval" / "control_auc.csv")}
    print(f"\ntotal {total:.0f}s")
    print(f"macro AUC (held-out, unaggregated): {float(summary['macro']['auc_mean']):.4f}")
    for name in ("Baseline", "EarlyEPG", "LateEPG"):
        print(f"  {name:9s} AUC {float(summary[name]['auc_mean']):.4f}"
              f"   control {float(control[name]['auc']):.3f}")
    print(f"report: {run / 'report' / 'report.md'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
