"""Exact distance transforms and the additive boundary weight map.

The weight map marks a band around the label boundary found by K^3 average
pooling of the mask: voxels whose pooled value is strictly between 0 and 1.
Band voxels outside the mask get ``w1``, band voxels inside get ``w2``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numba
import numpy as np

from .volgrid import LabelMap

DEFAULT_W1 = 40.0
DEFAULT_W2 = 1.0
DEFAULT_K = 11


@numba.njit(cache=True)
def _envelope_1d(f, n, step, out, v, z):
    # lower envelope of parabolas f[q] + (step*(p-q))^2, infinite f skipped
    k = -1
    for q in range(n):
        if not np.isfinite(f[q]):
            continue
        xq = step * q
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            xv = step * v[k]
            s = ((f[q] + xq * xq) - (f[v[k]] + xv * xv)) / (2.0 * (xq - xv))
            if s > z[k]:
                break
            k -= 1  # z[0] = -inf keeps k >= 0
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for p in range(n):
            out[p] = np.inf
        return
    j = 0
    for p in range(n):
        xp = step * p
        while z[j + 1] < xp:
            j += 1
        d = step * (p - v[j])
        out[p] = f[v[j]] + d * d


@numba.njit(cache=True)
def _edt_pass(a, step):
    # a: (m, n) rows are independent lines
    m, n = a.shape
    out = np.empty_like(a)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1, dtype=np.float64)
    buf = np.empty(n, dtype=np.float64)
    for i in range(m):
        _envelope_1d(a[i], n, step, buf, v, z)
        out[i, :] = buf
    return out


def edt_squared(features: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared Euclidean distance from every voxel to the nearest feature voxel.

    Separable lower-envelope transform, one pass per axis, measured between
    voxel centers with per-axis step ``spacing``. Grids without any feature
    return ``inf`` everywhere.
    """
    feat = np.asarray(features, dtype=bool)
    g = np.where(feat, 0.0, np.inf)
    for axis in range(feat.ndim):
        moved = np.moveaxis(g, axis, -1)
        shape = moved.shape
        lines = np.ascontiguousarray(moved.reshape(-1, shape[-1]))
        g = np.moveaxis(_edt_pass(lines, float(spacing[axis])).reshape(shape), -1, axis)
    return np.ascontiguousarray(g)


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a 6-connected background neighbour.

    Voxels beyond the grid count as background, so foreground touching the
    grid edge is surface.
    """
    m = np.asarray(mask, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    for axis in range(m.ndim):
        for shift in (-1, 1):
            interior &= np.roll(padded, shift, axis=axis)[1:-1, 1:-1, 1:-1]
    return m & ~interior


@dataclass(frozen=True)
class SignedDistanceField:
    data: np.ndarray
    spacing: Tuple[float, float, float]
    metric: str = "voxel"


def signed_distance(y: LabelMap, metric: str = "voxel") -> SignedDistanceField:
    """Exact signed distance to the label surface, positive inside.

    Surface voxels sit at 0; background voxels are negative.
    """
    if metric not in ("voxel", "mm"):
        raise ValueError(f"metric must be 'voxel' or 'mm', got {metric!r}")
    m = y.mask
    if not m.any() or m.all():
        raise ValueError("signed distance needs both foreground and background voxels")
    step = y.spacing if metric == "mm" else (1.0, 1.0, 1.0)
    d = np.sqrt(edt_squared(surface_mask(m), step))
    return SignedDistanceField(np.where(m, d, -d), y.spacing, metric)


def _box_count(mask: np.ndarray, K: int) -> np.ndarray:
    # number of foreground voxels in the zero-padded K^3 window around each voxel
    r = K // 2
    c = np.asarray(mask, dtype=np.int64)
    for axis in range(c.ndim):
        pad = [(0, 0)] * c.ndim
        pad[axis] = (r + 1, r)
        cs = np.cumsum(np.pad(c, pad), axis=axis)
        n = c.shape[axis]
        hi = np.take(cs, np.arange(K, K + n), axis=axis)
        lo = np.take(cs, np.arange(0, n), axis=axis)
        c = hi - lo
    return c


def _check_k(K) -> int:
    if int(K) != K or K < 3 or K % 2 == 0:
        raise ValueError(f"pooling kernel K must be an odd integer >= 3, got {K!r}")
    return int(K)


def boundary_band(y: LabelMap, K: int = DEFAULT_K) -> np.ndarray:
    """Voxels whose zero-padded K^3 average of the mask lies strictly in (0, 1).

    The band is computed from integer window counts, so membership is exact.
    Its half-width is roughly (K - 1) / 2 voxels in Chebyshev distance.
    """
    K = _check_k(K)
    counts = _box_count(y.mask, K)
    return (counts > 0) & (counts < K ** 3)


@dataclass(frozen=True)
class WeightMap:
    data: np.ndarray
    w1: float
    w2: float
    K: int


def weight_map(y: LabelMap, w1: float = DEFAULT_W1, w2: float = DEFAULT_W2,
               K: int = DEFAULT_K) -> WeightMap:
    """Additive boundary weight: ``w1`` on the band outside the mask, ``w2`` inside."""
    if w1 < 0 or w2 < 0:
        raise ValueError("boundary weights must be non-negative")
    m = y.mask
    if not m.any():
        raise ValueError("weight map needs a nonempty mask (no boundary otherwise)")
    band = boundary_band(y, K)
    W = np.zeros(m.shape, dtype=np.float64)
    W[band & ~m] = w1
    W[band & m] = w2
    return WeightMap(W, float(w1), float(w2), int(K))
