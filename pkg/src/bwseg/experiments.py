"""Desk-scale experiments on phantom data, shared by ``scripts/`` and the
acceptance tests. Sizes are chosen to finish on a single laptop core."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from . import metrics
from .augment import AugmentConfig
from .losses import LossConfig
from .phantom import Dataset, PhantomConfig, make_dataset, make_phantom_series
from .timeseries import SeriesPrediction, analyzed_indices, oxygenation_response, segment_series
from .unet import TrainConfig, UNetConfig, segment, train

log = logging.getLogger(__name__)

DESK_UNET = UNetConfig(levels=3, base_channels=8)
DESK_LR = 3e-3
DESK_HEAD_PRIOR = 0.05

# Geometric magnitudes scaled from a 112-voxel field of view to ~40 voxels.
DESK_AUGMENT = AugmentConfig(max_translation_vox=4.0, elastic_max_disp_vox=3.0, noise_sigma=0.1)


def overfit_run(seed: int = 0, epochs: int = 200, loss: str = "bw-ce"):
    """Train on a single 32^3 phantom frame without augmentation."""
    pc = PhantomConfig(dims=(32, 32, 32), T=1, phase_bounds=(1, 1), seed=seed)
    series = make_phantom_series(pc)
    cfg = TrainConfig(learning_rate=DESK_LR, epochs=epochs, batch_size=1, unet=DESK_UNET, augment=None,
                      input_dims=(32, 32, 32), seed=seed, loss=LossConfig.from_name(loss),
                      head_prior=DESK_HEAD_PRIOR, val_every=10)
    return train([series], [series], cfg)


@dataclass
class EvalSummary:
    loss: str
    seed: int
    dice: List[float]
    hd95: List[float]
    flagged: int
    volume_bias: List[float] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    @property
    def mean_hd95(self) -> float:
        return float(np.mean(self.hd95))

    @property
    def mean_volume_bias(self) -> float:
        return float(np.mean(self.volume_bias))


def desk_train_config(loss: str, seed: int, epochs: int, dims=(40, 40, 24)) -> TrainConfig:
    return TrainConfig(learning_rate=DESK_LR, epochs=epochs, batch_size=4, unet=DESK_UNET,
                       augment=DESK_AUGMENT, input_dims=dims, seed=seed,
                       loss=LossConfig.from_name(loss), head_prior=DESK_HEAD_PRIOR, val_every=5)


def evaluate_test(net, dataset: Dataset, input_dims, stride: int = 4) -> tuple:
    """Dice, HD95, flag count and relative volume error (|pred| - |truth|) / |truth|
    over every ``stride``-th frame of each test subject."""
    dice, hd, flagged, bias = [], [], 0, []
    for rec in dataset.split("test"):
        series = rec.series(full_labels=True)
        for t in analyzed_indices(series.T, stride):
            res = segment(net, series.frames[t], input_dims)
            rep = metrics.evaluate_pair(series.frames[t], series.labels[t], res.label)
            dice.append(rep.dice)
            bias.append((rep.n_pred - rep.n_truth) / rep.n_truth)
            if rep.hd95_mm is None:
                flagged += 1
            else:
                hd.append(rep.hd95_mm)
    return dice, hd, flagged, bias


def method_effect(n_subjects: int = 20, seeds: Sequence[int] = (0, 1, 2), epochs: int = 60,
                  losses: Sequence[str] = ("bw-ce", "ce"), data_seed: int = 0,
                  keep_models: bool = False):
    """Train each loss on the same phantom dataset for several seeds and score the test split.

    Returns ``(summaries, dataset, models)``; ``models`` maps (loss, seed) to
    the trained network when ``keep_models`` is set.
    """
    dataset = make_dataset(n_subjects, PhantomConfig(), data_seed)
    train_s = [r.series() for r in dataset.split("train")]
    val_s = [r.series() for r in dataset.split("val")]
    summaries, models = [], {}
    for seed in seeds:
        for loss in losses:
            t0 = time.time()
            cfg = desk_train_config(loss, seed, epochs)
            net, _ = train(train_s, val_s, cfg)
            dice, hd, flagged, bias = evaluate_test(net, dataset, cfg.input_dims)
            summaries.append(EvalSummary(loss, seed, dice, hd, flagged, bias))
            log.info("%s seed %d: dice %.4f hd95 %.2f (%.0fs)", loss, seed, np.mean(dice),
                     np.mean(hd) if hd else float("nan"), time.time() - t0)
            if keep_models:
                models[(loss, seed)] = net
    return summaries, dataset, models


def aggregate(summaries: Sequence[EvalSummary]) -> Dict[str, dict]:
    out: Dict[str, dict] = {}
    for loss in sorted({s.loss for s in summaries}):
        rows = [s for s in summaries if s.loss == loss]
        out[loss] = {"mean_dice": float(np.mean([s.mean_dice for s in rows])),
                     "mean_hd95": float(np.mean([s.mean_hd95 for s in rows])),
                     "per_seed_dice": [s.mean_dice for s in rows],
                     "per_seed_hd95": [s.mean_hd95 for s in rows],
                     "mean_volume_bias": float(np.mean([s.mean_volume_bias for s in rows])),
                     "flagged": int(sum(s.flagged for s in rows))}
    return out


def hyperoxia_recovery(net, input_dims=(40, 40, 24), seed: int = 123, stride: int = 2):
    """Delta-b on a noise-free phantom with a 10% ramp: (truth report, predicted report)."""
    pc = PhantomConfig(noise_sigma=0.0, ramp_target=0.10, seed=seed)
    series = make_phantom_series(pc)
    truth = oxygenation_response(series, SeriesPrediction.from_labels(series, stride))
    pred = segment_series(net, series, stride, input_dims)
    return truth, oxygenation_response(series, pred)
