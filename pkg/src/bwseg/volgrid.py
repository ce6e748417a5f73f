"""Volumetric containers and the preprocessing chain.

Arrays are indexed ``data[x, y, z]`` with shape ``(H, W, D)``; on disk the
x index varies fastest (Fortran order), the same as NIfTI.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

PHASES = ("normoxic", "hyperoxic", "return")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def _check_spacing(spacing) -> Tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3 or not all(math.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing must be three positive finite values, got {spacing!r}")
    return sp


@dataclass(frozen=True)
class Volume:
    """A single 3D scalar frame with voxel spacing in mm."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("volume contains non-finite intensities")
        object.__setattr__(self, "data", _frozen(arr))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    def with_data(self, data) -> "Volume":
        return Volume(data, self.spacing)


@dataclass(frozen=True)
class LabelMap:
    """Binary mask aligned with a :class:`Volume`."""

    data: np.ndarray
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {arr.shape}")
        if arr.dtype != np.bool_:
            bad = (arr != 0) & (arr != 1)
            if np.any(bad):
                raise ValueError(f"label map holds non-binary values, e.g. {arr[bad].flat[0]!r}")
        object.__setattr__(self, "data", _frozen(arr.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(n) for n in self.data.shape)

    @property
    def mask(self) -> np.ndarray:
        return self.data.astype(bool)

    def count(self) -> int:
        return int(self.data.sum(dtype=np.int64))

    def with_data(self, data) -> "LabelMap":
        return LabelMap(data, self.spacing)


@dataclass(frozen=True)
class BoldSeries:
    """Time series of frames with oxygenation phases and sparse labels.

    ``phase_bounds = (h, r)`` means frames ``[0, h)`` are normoxic baseline,
    ``[h, r)`` hyperoxic and ``[r, T)`` the return to normoxia.
    """

    frames: Tuple[Volume, ...]
    phase_bounds: Tuple[int, int]
    labels: Dict[int, LabelMap] = field(default_factory=dict)
    subject_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise ValueError("series needs at least one frame")
        dims, spacing = frames[0].dims, frames[0].spacing
        for i, f in enumerate(frames):
            if f.dims != dims or f.spacing != spacing:
                raise ValueError(f"frame {i} has dims/spacing {f.dims}/{f.spacing}, expected {dims}/{spacing}")
        h, r = (int(b) for b in self.phase_bounds)
        if not 0 <= h <= r <= len(frames):
            raise ValueError(f"phase bounds {self.phase_bounds} invalid for {len(frames)} frames")
        labels = {}
        for idx, lab in dict(self.labels).items():
            idx = int(idx)
            if not 0 <= idx < len(frames):
                raise ValueError(f"label index {idx} outside series of {len(frames)} frames")
            if lab.dims != dims:
                raise ValueError(f"label {idx} dims {lab.dims} do not match frames {dims}")
            labels[idx] = lab
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "phase_bounds", (h, r))
        object.__setattr__(self, "labels", dict(sorted(labels.items())))

    @property
    def T(self) -> int:
        return len(self.frames)

    @property
    def dims(self):
        return self.frames[0].dims

    @property
    def spacing(self):
        return self.frames[0].spacing

    def phase(self, t: int) -> str:
        h, r = self.phase_bounds
        if t < h:
            return "normoxic"
        if t < r:
            return "hyperoxic"
        return "return"

    @property
    def phases(self) -> List[str]:
        return [self.phase(t) for t in range(self.T)]


def nearest_rank(values: np.ndarray, percent: int) -> float:
    """Nearest-rank percentile: sorted element at index ceil(p*N/100) - 1."""
    flat = np.asarray(values).ravel()
    n = flat.size
    if n == 0:
        raise ValueError("percentile of an empty set")
    if not 0 < percent <= 100:
        raise ValueError("percent must be in (0, 100]")
    k = (percent * n + 99) // 100 - 1
    return float(np.partition(flat, k)[k])


def split_interleaved(v: Volume) -> Tuple[Volume, Volume]:
    """Split an interleaved acquisition into even- and odd-slice volumes."""
    D = v.dims[2]
    if D % 2:
        raise ValueError(f"interleaved volume needs an even slice count, got {D}")
    sx, sy, sz = v.spacing
    sp = (sx, sy, 2 * sz)
    return Volume(v.data[:, :, 0::2], sp), Volume(v.data[:, :, 1::2], sp)


def _interp_axis(a: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = a.shape[axis]
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    shape = [1, 1, 1]
    shape[axis] = -1
    frac = frac.reshape(shape)
    return np.take(a, lo, axis=axis) * (1.0 - frac) + np.take(a, hi, axis=axis) * frac


def resample_linear(v: Volume, target_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling onto a grid anchored at the first voxel center.

    Output dims are ``ceil(dim * spacing / target)``; samples past the last
    source voxel take the edge value.
    """
    target = _check_spacing(target_spacing)
    out = v.data.astype(np.float64)
    for axis in range(3):
        src, dst = v.spacing[axis], target[axis]
        if src == dst:
            continue
        n_out = math.ceil(v.dims[axis] * src / dst - 1e-9)
        coords = np.arange(n_out) * (dst / src)
        out = _interp_axis(out, axis, coords)
    return Volume(out, target)


def normalize_p90(v: Volume) -> Volume:
    """Scale intensities so the nearest-rank 90th percentile maps to 1."""
    p90 = nearest_rank(v.data, 90)
    if p90 <= 0:
        raise ValueError(f"90th percentile intensity is {p90}; cannot normalize")
    return v.with_data(v.data.astype(np.float64) / p90)


def _pad_crop_slices(dim: int, target: int):
    margin = target - dim
    if margin >= 0:
        lo = margin // 2
        return (lo, margin - lo), slice(None)
    cut = -margin
    lo = cut // 2
    return (0, 0), slice(lo, dim - (cut - lo))


def crop_or_pad_array(a: np.ndarray, target_dims: Sequence[int]) -> np.ndarray:
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise ValueError(f"target dims must be three positive ints, got {target_dims}")
    pads, slices = [], []
    for dim, tgt in zip(a.shape, target_dims):
        pad, sl = _pad_crop_slices(dim, int(tgt))
        pads.append(pad)
        slices.append(sl)
    return np.pad(a[tuple(slices)], pads, mode="constant", constant_values=0)


def crop_or_pad(v, target_dims: Sequence[int]):
    """Centered crop and/or zero-pad per axis; odd margins favour the high side."""
    return v.with_data(crop_or_pad_array(v.data, target_dims))
