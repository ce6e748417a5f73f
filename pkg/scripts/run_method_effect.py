"""BW-CE versus plain CE on a 20-subject phantom dataset, several seeds.

    python scripts/run_method_effect.py --seeds 0 1 2 --epochs 60 --out results/method_effect.json

Takes roughly 4 minutes per seed on one CPU core.
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from bwseg.experiments import aggregate, hyperoxia_recovery, method_effect


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--subjects", type=int, default=20)
    ap.add_argument("--losses", nargs="+", default=["bw-ce", "ce"])
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    torch.set_num_threads(1)
    t0 = time.time()
    summaries, dataset, models = method_effect(args.subjects, args.seeds, args.epochs, args.losses,
                                               keep_models=True)
    result = {"aggregate": aggregate(summaries), "dataset_digest": dataset.digest(),
              "seconds": round(time.time() - t0, 1), "delta_b": {}}
    for (loss, seed), net in sorted(models.items()):
        truth, pred = hyperoxia_recovery(net)
        result["delta_b"][f"{loss}/seed{seed}"] = {"truth": truth.delta_b, "predicted": pred.delta_b}
    text = json.dumps(result, indent=1, sort_keys=True)
    print(text)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text + "\n")


if __name__ == "__main__":
    main()
