"""Binary segmentation losses with analytic gradients.

Each loss takes a foreground probability field ``p`` and a binary target
``y`` of the same shape, reduces by the mean over voxels, and returns the
gradient with respect to ``p``. The ``*_logits`` variants take the
pre-sigmoid field instead and return the gradient with respect to it; they
use log-sigmoid directly and so need no probability clamping.

Boundary weighting multiplies each voxel's loss by ``1 + W(x)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import boundary
from .volgrid import LabelMap

EPS = 1e-7

BASES = ("ce", "dice", "focal", "ce+dice", "focal+dice")


@dataclass
class LossResult:
    value: float
    grad: np.ndarray
    voxel_loss: Optional[np.ndarray] = None


@dataclass
class LossConfig:
    base: str = "ce"
    boundary_weighting: bool = True
    w1: float = boundary.DEFAULT_W1
    w2: float = boundary.DEFAULT_W2
    K: int = boundary.DEFAULT_K
    focal_gamma: float = 2.0
    dice_smooth: float = 1.0
    dice_weight: float = 1.0

    def __post_init__(self):
        self.base = self.base.lower()
        if self.base not in BASES:
            raise ValueError(f"unknown loss base {self.base!r}; choose from {BASES}")
        if self.boundary_weighting and self.base == "dice":
            raise ValueError("boundary weighting needs a voxel-wise term; plain Dice has none")
        for name in ("w1", "w2", "focal_gamma", "dice_weight"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if not np.isfinite(self.dice_smooth) or self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")
        if self.boundary_weighting:
            boundary._check_k(self.K)

    @classmethod
    def from_name(cls, name: str, **kw) -> "LossConfig":
        """Parse names such as ``ce``, ``bw-ce``, ``bw-focal+dice``."""
        name = name.lower().replace(" ", "")
        bw = name.startswith("bw-")
        return cls(base=name[3:] if bw else name, boundary_weighting=bw, **kw)

    @property
    def name(self) -> str:
        return ("bw-" if self.boundary_weighting else "") + self.base

    def to_dict(self) -> dict:
        return asdict(self)


def _check(p, y):
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y.data if isinstance(y, LabelMap) else y, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"prediction shape {p.shape} does not match target {y.shape}")
    return p, y


def _clamp(p):
    pc = np.clip(p, EPS, 1.0 - EPS)
    live = (p > EPS) & (p < 1.0 - EPS)
    return pc, live


def ce_loss(p, y) -> LossResult:
    p, y = _check(p, y)
    pc, live = _clamp(p)
    lv = -(y * np.log(pc) + (1 - y) * np.log1p(-pc))
    dl = -(y - pc) / (pc * (1 - pc))
    return LossResult(float(lv.mean()), np.where(live, dl, 0.0) / p.size, lv)


def focal_loss(p, y, gamma: float = 2.0) -> LossResult:
    p, y = _check(p, y)
    if gamma < 0:
        raise ValueError("focal gamma must be >= 0")
    pc, live = _clamp(p)
    q = 1 - pc
    logp, logq = np.log(pc), np.log1p(-pc)
    lv = -(y * q ** gamma * logp + (1 - y) * pc ** gamma * logq)
    d_pos = gamma * q ** (gamma - 1) * logp - q ** gamma / pc
    d_neg = -gamma * pc ** (gamma - 1) * logq + pc ** gamma / q
    dl = y * d_pos + (1 - y) * d_neg
    return LossResult(float(lv.mean()), np.where(live, dl, 0.0) / p.size, lv)


def dice_loss(p, y, smooth: float = 1.0) -> LossResult:
    p, y = _check(p, y)
    inter = np.sum(p * y)
    union = np.sum(p * p) + np.sum(y * y) + smooth
    num = 2 * inter + smooth
    grad = -(2 * y * union - num * 2 * p) / union ** 2
    return LossResult(float(1 - num / union), grad)


def apply_boundary_weighting(base: LossResult, W) -> LossResult:
    """Scale a voxel-wise loss and its gradient by ``1 + W``."""
    if base.voxel_loss is None:
        raise ValueError("boundary weighting needs a per-voxel loss field")
    W = np.asarray(W.data if isinstance(W, boundary.WeightMap) else W, dtype=np.float64)
    if W.shape != base.voxel_loss.shape:
        raise ValueError(f"weight map shape {W.shape} does not match loss field {base.voxel_loss.shape}")
    scale = 1.0 + W
    lv = base.voxel_loss * scale
    return LossResult(float(lv.mean()), base.grad * scale, lv)


# -- logit-space variants -------------------------------------------------------

def _log_sigmoid(z):
    return -np.logaddexp(0.0, -z)


def _sigmoid(z):
    return np.exp(_log_sigmoid(z))


def ce_loss_logits(z, y) -> LossResult:
    z, y = _check(z, y)
    p = _sigmoid(z)
    lv = -(y * _log_sigmoid(z) + (1 - y) * _log_sigmoid(-z))
    return LossResult(float(lv.mean()), (p - y) / z.size, lv)


def focal_loss_logits(z, y, gamma: float = 2.0) -> LossResult:
    z, y = _check(z, y)
    logp, logq = _log_sigmoid(z), _log_sigmoid(-z)
    p, q = np.exp(logp), np.exp(logq)
    lv = -(y * q ** gamma * logp + (1 - y) * p ** gamma * logq)
    d_pos = gamma * p * q ** gamma * logp - q ** (gamma + 1)
    d_neg = -gamma * p ** gamma * q * logq + p ** (gamma + 1)
    dl = y * d_pos + (1 - y) * d_neg
    return LossResult(float(lv.mean()), dl / z.size, lv)


def dice_loss_logits(z, y, smooth: float = 1.0) -> LossResult:
    z, y = _check(z, y)
    p = _sigmoid(z)
    res = dice_loss(p, y, smooth)
    return LossResult(res.value, res.grad * p * (1 - p))


# -- composition ------------------------------------------------------------------

def _weights_for(y, cfg: LossConfig, weights):
    if weights is not None:
        return weights
    lab = y if isinstance(y, LabelMap) else LabelMap(np.asarray(y))
    return boundary.weight_map(lab, cfg.w1, cfg.w2, cfg.K)


def _compose(x, y, cfg: LossConfig, weights, ce, focal, dice) -> LossResult:
    parts = cfg.base.split("+")
    voxel_term = parts[0] if parts[0] in ("ce", "focal") else None
    total = None
    if voxel_term == "ce":
        total = ce(x, y)
    elif voxel_term == "focal":
        total = focal(x, y, cfg.focal_gamma)
    if total is not None and cfg.boundary_weighting:
        total = apply_boundary_weighting(total, _weights_for(y, cfg, weights))
    if "dice" in parts:
        d = dice(x, y, cfg.dice_smooth)
        if total is None:
            return d
        lam = cfg.dice_weight
        total = LossResult(total.value + lam * d.value, total.grad + lam * d.grad, total.voxel_loss)
    return total


def composite_loss(p, y, cfg: LossConfig, weights=None) -> LossResult:
    """Loss named by ``cfg`` on probabilities; the Dice term is never boundary-weighted."""
    return _compose(p, y, cfg, weights, ce_loss, focal_loss, dice_loss)


def composite_loss_logits(z, y, cfg: LossConfig, weights=None) -> LossResult:
    """Same as :func:`composite_loss` but on logits, gradient w.r.t. the logits."""
    return _compose(z, y, cfg, weights, ce_loss_logits, focal_loss_logits, dice_loss_logits)
