#!/usr/bin/env python3
"""Print the per-layer trainable-parameter table for every zoo model.

Optionally writes the same table as CSV (the file the tests check against
the closed-form layer arithmetic).
"""

import argparse
import sys

from epgstage import zoo


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--csv", default=None, help="also write the table to this path")
    ap.add_argument("--model", default=None, choices=list(zoo.MODEL_NAMES),
                    help="restrict the printout to one model")
    args = ap.parse_args()

    names = [args.model] if args.model else list(zoo.MODEL_NAMES)
    for name in names:
        model = zoo.build(name)
        print(f"\n{name}  ({model.spec.family}, input {model.spec.input_length})")
        for row in model.layer_table:
            print(f"  {row.name:14s} {row.kind:10s} {str(row.out_shape):14s} "
                  f"{row.n_trainable:>10,}")
        print(f"  {'total':14s} {'':10s} {'':14s} {zoo.count_trainables(model):>10,}")
    if args.csv:
        zoo.write_count_report(args.csv)
        print(f"\nwrote {args.csv}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
