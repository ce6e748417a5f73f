"""Training-time augmentation for paired (volume, label) samples.

Every random transform has a deterministic counterpart taking explicit
parameters (``apply_affine``, ``apply_elastic``, ...); the ``random_*``
functions only draw those parameters from a ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence, Tuple

import numpy as np
from scipy import ndimage

from .volgrid import LabelMap, Volume


@dataclass
class AugmentConfig:
    max_translation_vox: float = 10.0
    max_rotation_deg: float = 22.0
    flip_axes: Tuple[bool, bool, bool] = (True, True, True)
    noise_sigma: float = 0.25
    elastic_control_points: int = 5
    elastic_max_disp_vox: float = 10.0
    elastic_spline: str = "bspline"
    volume_intensity_shift_frac: float = 0.25
    placenta_intensity_shift: float = 0.15
    p_flip: float = 0.5
    p_affine: float = 0.5
    p_elastic: float = 0.5
    p_intensity: float = 0.5
    p_noise: float = 0.5

    def __post_init__(self):
        self.flip_axes = tuple(bool(a) for a in self.flip_axes)
        for name in ("max_translation_vox", "max_rotation_deg", "noise_sigma", "elastic_max_disp_vox",
                     "volume_intensity_shift_frac", "placenta_intensity_shift"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("p_flip", "p_affine", "p_elastic", "p_intensity", "p_noise"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.elastic_control_points < 2:
            raise ValueError("elastic lattice needs at least 2 control points per axis")
        if self.elastic_spline not in ("bspline", "linear"):
            raise ValueError("elastic_spline must be 'bspline' or 'linear'")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(p_flip=0, p_affine=0, p_elastic=0, p_intensity=0, p_noise=0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flip_axes"] = list(self.flip_axes)
        return d


def sample_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for ``(seed, *stream)``, e.g. ``(seed, epoch, sample)``."""
    return np.random.default_rng([int(seed), *(int(s) for s in stream)])


# -- geometric ---------------------------------------------------------------------

def rotation_matrix(angles_deg: Sequence[float]) -> np.ndarray:
    """Rotation about x, then y, then z."""
    ax, ay, az = np.deg2rad(angles_deg)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def apply_affine(v: Volume, y: LabelMap, angles_deg=(0, 0, 0), translation=(0, 0, 0)):
    """Rotate about the grid center and translate content by ``translation`` voxels.

    Intensities are resampled trilinearly, labels by nearest neighbour; voxels
    mapped from outside the grid become 0.
    """
    R = rotation_matrix(angles_deg)
    center = (np.array(v.dims) - 1) / 2.0
    # output x samples input at R^T (x - c - t) + c
    Rinv = R.T
    offset = center - Rinv @ (center + np.asarray(translation, dtype=np.float64))
    vi = ndimage.affine_transform(v.data.astype(np.float64), Rinv, offset, order=1, mode="constant", cval=0.0)
    yi = ndimage.affine_transform(y.data, Rinv, offset, order=0, mode="constant", cval=0)
    return v.with_data(vi), y.with_data(yi)


def random_affine(v: Volume, y: LabelMap, cfg: AugmentConfig, rng: np.random.Generator):
    angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3)
    shift = rng.uniform(-cfg.max_translation_vox, cfg.max_translation_vox, 3)
    return apply_affine(v, y, angles, shift)


def _cubic_bspline(t):
    t = np.abs(t)
    out = np.zeros_like(t)
    a = t < 1
    b = (t >= 1) & (t < 2)
    out[a] = 2.0 / 3.0 - t[a] ** 2 + 0.5 * t[a] ** 3
    out[b] = (2.0 - t[b]) ** 3 / 6.0
    return out


def _basis(n_vox: int, n_ctrl: int, kind: str) -> np.ndarray:
    # control points spread evenly from the first to the last voxel
    u = np.arange(n_vox) * ((n_ctrl - 1) / max(n_vox - 1, 1))
    t = u[:, None] - np.arange(n_ctrl)[None, :]
    if kind == "bspline":
        return _cubic_bspline(t)
    return np.clip(1.0 - np.abs(t), 0.0, None)


def densify_field(control: np.ndarray, dims: Sequence[int], kind: str = "bspline") -> np.ndarray:
    """Tensor-product spline densification of a ``(n, n, n, 3)`` control lattice.

    Basis weights are non-negative and sum to at most 1, so no dense
    component exceeds the largest control component in magnitude.
    """
    Bx, By, Bz = (_basis(d, n, kind) for d, n in zip(dims, control.shape[:3]))
    return np.einsum("xi,yj,zk,ijkc->xyzc", Bx, By, Bz, control, optimize=True)


def warp(data: np.ndarray, field: np.ndarray, order: int) -> np.ndarray:
    """Sample ``data`` at ``x + field(x)``; outside the grid reads 0."""
    grid = np.indices(data.shape, dtype=np.float64)
    coords = grid + np.moveaxis(field, -1, 0)
    return ndimage.map_coordinates(data, coords, order=order, mode="constant", cval=0)


def apply_elastic(v: Volume, y: LabelMap, control: np.ndarray, kind: str = "bspline"):
    field = densify_field(np.asarray(control, dtype=np.float64), v.dims, kind)
    return (v.with_data(warp(v.data.astype(np.float64), field, 1)),
            y.with_data(warp(y.data, field, 0)))


def random_control_lattice(cfg: AugmentConfig, rng: np.random.Generator, magnitude=None) -> np.ndarray:
    n = cfg.elastic_control_points
    m = cfg.elastic_max_disp_vox if magnitude is None else magnitude
    return rng.uniform(-m, m, (n, n, n, 3))


def random_elastic(v: Volume, y: LabelMap, cfg: AugmentConfig, rng: np.random.Generator):
    return apply_elastic(v, y, random_control_lattice(cfg, rng), cfg.elastic_spline)


def apply_flips(v: Volume, y: LabelMap, axes: Sequence[int]):
    vd, yd = v.data, y.data
    for a in axes:
        vd, yd = np.flip(vd, a), np.flip(yd, a)
    return v.with_data(vd), y.with_data(yd)


# -- intensity ---------------------------------------------------------------------

def apply_intensity_shifts(v: Volume, y: LabelMap, scale: float = 1.0, placenta_shift: float = 0.0) -> Volume:
    """Scale the whole volume, then add ``placenta_shift`` inside the label."""
    out = v.data.astype(np.float64) * scale
    out[y.mask] += placenta_shift
    return v.with_data(out)


def intensity_shifts(v: Volume, y: LabelMap, cfg: AugmentConfig, rng: np.random.Generator) -> Volume:
    f = cfg.volume_intensity_shift_frac
    scale = rng.uniform(1 - f, 1 + f)
    shift = rng.uniform(-cfg.placenta_intensity_shift, cfg.placenta_intensity_shift)
    return apply_intensity_shifts(v, y, scale, shift)


def random_noise(v: Volume, cfg: AugmentConfig, rng: np.random.Generator) -> Volume:
    if cfg.noise_sigma == 0:
        return v
    return v.with_data(v.data + rng.normal(0.0, cfg.noise_sigma, v.dims))


def augment_sample(v: Volume, y: LabelMap, cfg: AugmentConfig, rng: np.random.Generator):
    """Flips, affine, elastic, intensity shifts, noise; each gated by its probability.

    A gate and its parameters are always drawn, so the number of draws per
    call is fixed regardless of which transforms fire.
    """
    gates = rng.random(5)
    flip_draw = rng.random(3)
    angles = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg, 3)
    shift = rng.uniform(-cfg.max_translation_vox, cfg.max_translation_vox, 3)
    control = random_control_lattice(cfg, rng)
    f = cfg.volume_intensity_shift_frac
    scale = rng.uniform(1 - f, 1 + f)
    pshift = rng.uniform(-cfg.placenta_intensity_shift, cfg.placenta_intensity_shift)
    noise_seed = int(rng.integers(0, 2 ** 63 - 1))

    if gates[0] < cfg.p_flip:
        axes = [a for a in range(3) if cfg.flip_axes[a] and flip_draw[a] < 0.5]
        v, y = apply_flips(v, y, axes)
    if gates[1] < cfg.p_affine:
        v, y = apply_affine(v, y, angles, shift)
    if gates[2] < cfg.p_elastic:
        v, y = apply_elastic(v, y, control, cfg.elastic_spline)
    if gates[3] < cfg.p_intensity:
        v = apply_intensity_shifts(v, y, scale, pshift)
    if gates[4] < cfg.p_noise:
        v = random_noise(v, cfg, np.random.default_rng(noise_seed))
    return v, y
