"""Hyperoxia response on a noise-free phantom, with truth masks and with a
freshly trained desk-scale network.

    python scripts/run_hyperoxia_demo.py --epochs 60
"""
import argparse
import json

import torch

from bwseg.experiments import desk_train_config, hyperoxia_recovery
from bwseg.phantom import PhantomConfig, make_dataset
from bwseg.unet import train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    torch.set_num_threads(1)
    ds = make_dataset(20, PhantomConfig(), 0)
    cfg = desk_train_config("bw-ce", args.seed, args.epochs)
    net, _ = train([r.series() for r in ds.split("train")], [r.series() for r in ds.split("val")], cfg)
    truth, pred = hyperoxia_recovery(net, cfg.input_dims)
    print(json.dumps({"configured": 0.10, "truth_masks": truth.delta_b, "predicted_masks": pred.delta_b,
                      "predicted_trace": pred.trace}, indent=1))


if __name__ == "__main__":
    main()
