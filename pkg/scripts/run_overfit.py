"""Overfit sanity check: one 32^3 phantom frame, no augmentation.

    python scripts/run_overfit.py --seed 0 --epochs 200
"""
import argparse
import json
import time

import torch

from bwseg.experiments import overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--loss", default="bw-ce")
    args = ap.parse_args()
    torch.set_num_threads(1)
    t0 = time.time()
    _, hist = overfit_run(args.seed, args.epochs, args.loss)
    best = max(hist, key=lambda r: r["train_dice"])
    print(json.dumps({"best_train_dice": best["train_dice"], "at_epoch": best["epoch"],
                      "final_train_dice": hist[-1]["train_dice"], "seconds": round(time.time() - t0, 1)},
                     indent=1))


if __name__ == "__main__":
    main()
