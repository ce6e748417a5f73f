"""Synthetic BOLD-like series with analytic ground truth.

A phantom frame holds a superellipsoid "placenta" of constant intensity
``placenta_intensity * (1 + ramp(t))``, wrapped in a rim of similar-looking
tissue and a smoothly textured background. Per-frame motion comes from a
B-spline displacement lattice evaluated analytically, so masks stay exact.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .augment import densify_field, sample_rng
from .volgrid import BoldSeries, LabelMap, Volume


@dataclass
class PhantomConfig:
    dims: Tuple[int, int, int] = (40, 40, 24)
    spacing: Tuple[float, float, float] = (3.0, 3.0, 3.0)
    center: Optional[Tuple[float, float, float]] = None  # voxels; grid center if None
    semi_axes: Tuple[float, float, float] = (9.0, 7.0, 4.0)
    exponent: float = 2.5
    rotation_deg: float = 0.0  # about z
    placenta_intensity: float = 100.0
    rim_intensity: float = 85.0
    rim_width_vox: float = 2.0
    background_level: float = 60.0
    texture_amplitude: float = 12.0
    texture_corr_vox: float = 2.0
    noise_sigma: float = 6.0
    ramp_target: float = 0.10
    ramp_frames: int = 4
    T: int = 48
    phase_bounds: Tuple[int, int] = (16, 40)
    motion_magnitude: float = 0.0
    motion_schedule: Optional[List[float]] = None
    control_points: int = 5
    edge_margin: float = 5.5
    seed: int = 0

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.spacing = tuple(float(s) for s in self.spacing)
        self.semi_axes = tuple(float(a) for a in self.semi_axes)
        self.phase_bounds = tuple(int(b) for b in self.phase_bounds)
        if self.center is not None:
            self.center = tuple(float(c) for c in self.center)
        if self.motion_schedule is not None:
            self.motion_schedule = [float(m) for m in self.motion_schedule]
            if len(self.motion_schedule) != self.T:
                raise ValueError(f"motion_schedule has {len(self.motion_schedule)} entries for T={self.T}")
        if self.ramp_target < 0:
            raise ValueError("ramp_target must be >= 0")
        if min(self.semi_axes) <= 0 or self.exponent <= 0:
            raise ValueError("semi-axes and exponent must be positive")
        h, r = self.phase_bounds
        if not 0 <= h <= r <= self.T or self.T < 1:
            raise ValueError(f"phase bounds {self.phase_bounds} invalid for T={self.T}")
        _check_fits(self)

    @property
    def grid_center(self) -> np.ndarray:
        if self.center is not None:
            return np.array(self.center)
        return (np.array(self.dims) - 1) / 2.0

    def magnitude(self, t: int) -> float:
        return self.motion_schedule[t] if self.motion_schedule is not None else self.motion_magnitude

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        return cls(**d)


def _check_fits(cfg: PhantomConfig):
    # the rotated shape lies inside its rotated bounding box
    a, b, c = cfg.semi_axes
    th = math.radians(cfg.rotation_deg)
    ex = a * abs(math.cos(th)) + b * abs(math.sin(th))
    ey = a * abs(math.sin(th)) + b * abs(math.cos(th))
    max_motion = max(cfg.motion_schedule) if cfg.motion_schedule else cfg.motion_magnitude
    ext = np.array([ex, ey, c]) + max_motion
    lo = cfg.grid_center - ext
    hi = cfg.grid_center + ext
    upper = np.array(cfg.dims) - 1 - cfg.edge_margin
    if np.any(lo < cfg.edge_margin) or np.any(hi > upper):
        raise ValueError(f"placenta extent {lo.round(2).tolist()}..{hi.round(2).tolist()} escapes the grid "
                         f"{cfg.dims} with margin {cfg.edge_margin}")


def ramp(cfg: PhantomConfig, t: int) -> float:
    """Fractional signal increase at frame ``t``: 0 at baseline, linear rise, then held."""
    h, r = cfg.phase_bounds
    if t < h or t >= r:
        return 0.0
    if cfg.ramp_frames <= 0:
        return cfg.ramp_target
    return cfg.ramp_target * min(1.0, (t - h + 1) / cfg.ramp_frames)


def texture(cfg: PhantomConfig) -> np.ndarray:
    """Static smoothed-noise background texture with unit standard deviation."""
    if cfg.texture_amplitude == 0:
        return np.zeros(cfg.dims)
    g = sample_rng(cfg.seed, 0).standard_normal(cfg.dims)
    g = ndimage.gaussian_filter(g, cfg.texture_corr_vox, mode="wrap")
    return g / g.std()


def displacement(cfg: PhantomConfig, t: int) -> Optional[np.ndarray]:
    m = cfg.magnitude(t)
    if m == 0:
        return None
    n = cfg.control_points
    control = sample_rng(cfg.seed, 1, t).uniform(-m, m, (n, n, n, 3))
    return densify_field(control, cfg.dims)


def _shape_level(cfg: PhantomConfig, coords: np.ndarray, grow: float = 0.0) -> np.ndarray:
    rel = coords - cfg.grid_center.reshape(3, 1, 1, 1)
    th = math.radians(cfg.rotation_deg)
    x = math.cos(th) * rel[0] + math.sin(th) * rel[1]
    y = -math.sin(th) * rel[0] + math.cos(th) * rel[1]
    z = rel[2]
    a, b, c = (s + grow for s in cfg.semi_axes)
    e = cfg.exponent
    return np.abs(x / a) ** e + np.abs(y / b) ** e + np.abs(z / c) ** e


def frame_masks(cfg: PhantomConfig, t: int):
    """(placenta, rim) boolean masks for frame ``t``."""
    coords = np.indices(cfg.dims, dtype=np.float64)
    d = displacement(cfg, t)
    if d is not None:
        coords = coords + np.moveaxis(d, -1, 0)
    inside = _shape_level(cfg, coords) <= 1.0
    rim = (_shape_level(cfg, coords, cfg.rim_width_vox) <= 1.0) & ~inside
    return inside, rim


def make_phantom_frame(cfg: PhantomConfig, t: int, tex: Optional[np.ndarray] = None):
    """Frame ``t`` as ``(Volume, LabelMap)``; fully determined by ``cfg.seed`` and ``t``."""
    if not 0 <= t < cfg.T:
        raise ValueError(f"frame {t} outside series of {cfg.T}")
    if tex is None:
        tex = texture(cfg)
    inside, rim = frame_masks(cfg, t)
    img = cfg.background_level + cfg.texture_amplitude * tex
    img[rim] = cfg.rim_intensity + 0.5 * cfg.texture_amplitude * tex[rim]
    img[inside] = cfg.placenta_intensity * (1.0 + ramp(cfg, t))
    if cfg.noise_sigma > 0:
        img = img + sample_rng(cfg.seed, 2, t).normal(0.0, cfg.noise_sigma, cfg.dims)
    return Volume(img, cfg.spacing), LabelMap(inside, cfg.spacing)


def make_phantom_series(cfg: PhantomConfig, label_frames: Optional[Sequence[int]] = None,
                        subject_id: str = "phantom") -> BoldSeries:
    """All ``cfg.T`` frames; every frame labeled unless ``label_frames`` restricts it."""
    tex = texture(cfg)
    keep = set(range(cfg.T)) if label_frames is None else set(int(i) for i in label_frames)
    frames, labels = [], {}
    for t in range(cfg.T):
        v, y = make_phantom_frame(cfg, t, tex)
        frames.append(v)
        if t in keep:
            labels[t] = y
    return BoldSeries(frames, cfg.phase_bounds, labels, subject_id)


# -- datasets ----------------------------------------------------------------------

@dataclass
class DatasetVariation:
    """Ranges for per-subject parameter draws (uniform, inclusive)."""

    axis_scale: Tuple[float, float] = (0.8, 1.0)
    exponent: Tuple[float, float] = (2.0, 3.0)
    rotation_deg: Tuple[float, float] = (-30.0, 30.0)
    center_jitter_vox: float = 1.0
    placenta_intensity: Tuple[float, float] = (90.0, 110.0)
    rim_contrast: Tuple[float, float] = (0.8, 0.9)  # rim / placenta intensity
    ramp_target: Tuple[float, float] = (0.05, 0.15)
    motion_magnitude: Tuple[float, float] = (0.0, 1.0)
    max_labels: int = 6

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class SubjectRecord:
    subject_id: str
    split: str
    config: PhantomConfig
    label_frames: List[int]

    def series(self, full_labels: bool = False) -> BoldSeries:
        return make_phantom_series(self.config, None if full_labels else self.label_frames, self.subject_id)

    def to_dict(self) -> dict:
        return {"subject_id": self.subject_id, "split": self.split,
                "label_frames": list(self.label_frames), "config": self.config.to_dict()}


@dataclass
class Dataset:
    subjects: List[SubjectRecord]
    seed: int

    def split(self, name: str) -> List[SubjectRecord]:
        return [s for s in self.subjects if s.split == name]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "subjects": [s.to_dict() for s in self.subjects]}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def split_sizes(n: int) -> Tuple[int, int, int]:
    """(train, val, test) counts: floor for val (15%) and test (20%), rest to train."""
    val = (15 * n) // 100
    test = (20 * n) // 100
    return n - val - test, val, test


def _pick_labels(cfg: PhantomConfig, n_labels: int, rng: np.random.Generator) -> List[int]:
    h, r = cfg.phase_bounds
    normoxic, hyperoxic = list(range(0, h)), list(range(h, r))
    picks = [int(rng.choice(normoxic))] if normoxic else []
    if n_labels >= 2 and hyperoxic:
        picks.append(int(rng.choice(hyperoxic)))
    pool = [t for t in normoxic + hyperoxic if t not in picks]
    extra = max(0, n_labels - len(picks))
    if extra and pool:
        picks += [int(t) for t in rng.choice(pool, size=min(extra, len(pool)), replace=False)]
    return sorted(picks)


def make_dataset(n_subjects: int, base: PhantomConfig, seed: int,
                 variation: Optional[DatasetVariation] = None) -> Dataset:
    """Randomized subjects split 65/15/20 with 1..max_labels labeled frames each.

    Labeled frames start with one normoxic frame, then one hyperoxic frame when
    two or more labels are drawn, then random frames from either phase.
    """
    if n_subjects < 5:
        raise ValueError("a dataset needs at least 5 subjects")
    var = variation or DatasetVariation()
    rng = sample_rng(seed, 7)
    n_train, n_val, n_test = split_sizes(n_subjects)
    splits = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    order = rng.permutation(n_subjects)
    subjects = []
    for i in range(n_subjects):
        u = lambda lo_hi: float(rng.uniform(*lo_hi))  # noqa: E731
        scale = u(var.axis_scale)
        pint = u(var.placenta_intensity)
        cfg = replace(
            base,
            semi_axes=tuple(a * scale for a in base.semi_axes),
            exponent=u(var.exponent),
            rotation_deg=u(var.rotation_deg),
            center=tuple(base.grid_center + rng.uniform(-var.center_jitter_vox, var.center_jitter_vox, 3)),
            placenta_intensity=pint,
            rim_intensity=pint * u(var.rim_contrast),
            ramp_target=u(var.ramp_target),
            motion_magnitude=u(var.motion_magnitude),
            motion_schedule=None,
            seed=int(rng.integers(0, 2 ** 31 - 1)),
        )
        n_labels = int(rng.integers(1, var.max_labels + 1))
        labels = _pick_labels(cfg, n_labels, rng)
        subjects.append(SubjectRecord(f"subj{i:03d}", splits[int(np.where(order == i)[0][0])], cfg, labels))
    return Dataset(subjects, seed)
