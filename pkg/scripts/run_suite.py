"""Run the default comparison suite and print the mean/std table.

    python scripts/run_suite.py --out runs/default
    python scripts/run_suite.py --out runs/quick --epochs 5 --seeds 0
"""

import argparse
import logging

from meep.runner import METRICS, default_suite, run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/default")
    ap.add_argument("--epochs", type=int, default=40)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    records = run_suite(default_suite(seeds=args.seeds, epochs=args.epochs), args.out)
    print(f"{'model':26s}" + "".join(f"{m:>20s}" for m in METRICS))
    for rec in records:
        cells = "".join(f"{rec.aggregate[m]['mean']:>11.4f} ±{rec.aggregate[m]['std']:<7.4f}" for m in METRICS)
        print(f"{rec.name:26s}{cells}")
    print(f"wrote {args.out}/results.csv")


if __name__ == "__main__":
    main()
