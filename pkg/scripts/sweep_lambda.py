"""Pick the regulariser weight by mean validation ECE over seeds.

    python scripts/sweep_lambda.py --base dice --regularizer meep_kl --grid 0.001 0.003 0.01 0.03
    python scripts/sweep_lambda.py --base ce --regularizer meep_h            # coarse grid 0.1 0.3 0.5 1.0
"""

import argparse
import logging

import numpy as np

from meep.losses import ObjectiveSpec
from meep.runner import LAMBDA_GRID, ExperimentConfig, evaluate, train
from meep.synthdata import generate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--base", choices=("dice", "ce", "focal"), required=True)
    ap.add_argument("--regularizer", choices=("meep_h", "meep_kl"), required=True)
    ap.add_argument("--grid", type=float, nargs="+", default=list(LAMBDA_GRID))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=40)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    base_cfg = ExperimentConfig(epochs=args.epochs)
    data = generate(base_cfg.task)
    table = {}
    for lam in [0.0, *args.grid]:
        cfg = ExperimentConfig(objective=ObjectiveSpec(args.base, args.regularizer if lam else "none", lam=lam),
                               epochs=args.epochs)
        val_ece, val_dice = [], []
        for seed in args.seeds:
            params, _ = train(cfg, seed, data)
            res = evaluate(params, data.val, cfg.ece_bins)
            val_ece.append(res.report.ece)
            val_dice.append(res.dice_mean)
        table[lam] = (float(np.mean(val_ece)), float(np.mean(val_dice)))
        print(f"lambda={lam:<8g} val ECE {table[lam][0]:.4f}  val Dice {table[lam][1]:.4f}", flush=True)
    best = min(args.grid, key=lambda lam: table[lam][0])
    print(f"best lambda for {args.base}+{args.regularizer}: {best:g} "
          f"(val ECE {table[best][0]:.4f} vs {table[0.0][0]:.4f} without the term)")


if __name__ == "__main__":
    main()
