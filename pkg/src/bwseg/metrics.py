"""Overlap, surface-distance and signal metrics for a (truth, prediction) pair.

Surfaces are foreground voxels with a 6-connected background neighbour;
distances run between voxel centers in mm. HD95 and ASSD pool both directed
distance sets before taking the nearest-rank 95th percentile or the mean.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .boundary import edt_squared, surface_mask
from .volgrid import LabelMap, Volume, nearest_rank


class EmptyMaskError(ValueError):
    """A metric needs a nonempty mask. ``code`` names which one was empty."""

    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


def _masks(y, yhat):
    a = np.asarray(y.data if isinstance(y, LabelMap) else y).astype(bool)
    b = np.asarray(yhat.data if isinstance(yhat, LabelMap) else yhat).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return a, b


def dice(y, yhat) -> float:
    """2|A & B| / (|A| + |B|); 1 when both masks are empty."""
    a, b = _masks(y, yhat)
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.sum(a & b)) / (na + nb)


def surface_distances(y, yhat, spacing: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Directed surface distances in mm: (y surface -> yhat surface, yhat -> y)."""
    a, b = _masks(y, yhat)
    if not a.any():
        raise EmptyMaskError("empty_truth", "ground-truth mask is empty")
    if not b.any():
        raise EmptyMaskError("empty_prediction", "predicted mask is empty")
    sa, sb = surface_mask(a), surface_mask(b)
    d_ab = np.sqrt(edt_squared(sb, spacing)[sa])
    d_ba = np.sqrt(edt_squared(sa, spacing)[sb])
    return d_ab, d_ba


def hd95(y, yhat, spacing) -> float:
    d_ab, d_ba = surface_distances(y, yhat, spacing)
    return nearest_rank(np.concatenate([d_ab, d_ba]), 95)


def assd(y, yhat, spacing) -> float:
    d_ab, d_ba = surface_distances(y, yhat, spacing)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def masked_mean(v, mask) -> float:
    data = v.data if isinstance(v, Volume) else np.asarray(v)
    m = np.asarray(mask.data if isinstance(mask, LabelMap) else mask).astype(bool)
    if not m.any():
        raise EmptyMaskError("empty_mask", "mean over an empty mask")
    return float(data[m].astype(np.float64).mean())


def rel_bold_error(v: Volume, y, yhat) -> float:
    """|mean(v over yhat) - mean(v over y)| / mean(v over y). Not symmetric in y, yhat."""
    a, b = _masks(y, yhat)
    if not a.any():
        raise EmptyMaskError("empty_truth", "ground-truth mask is empty")
    if not b.any():
        raise EmptyMaskError("empty_prediction", "predicted mask is empty; mean signal undefined")
    ref = masked_mean(v, a)
    if ref == 0:
        raise EmptyMaskError("zero_signal", "mean signal over the ground truth is 0")
    return abs(masked_mean(v, b) - ref) / abs(ref)


CSV_FIELDS = ["subject_id", "frame_index", "phase", "dice", "hd95_mm", "assd_mm", "rel_bold_error", "flags"]


@dataclass
class MetricReport:
    dice: Optional[float]
    hd95_mm: Optional[float]
    assd_mm: Optional[float]
    rel_bold_error: Optional[float]
    n_truth: int
    n_pred: int
    n_intersection: int
    flags: List[str] = field(default_factory=list)
    subject_id: str = ""
    frame_index: int = -1
    phase: str = ""

    def recomputed_dice(self) -> float:
        total = self.n_truth + self.n_pred
        return 1.0 if total == 0 else 2.0 * self.n_intersection / total

    def row(self) -> dict:
        fmt = lambda x: "" if x is None else repr(float(x))  # noqa: E731
        return {"subject_id": self.subject_id, "frame_index": self.frame_index, "phase": self.phase,
                "dice": fmt(self.dice), "hd95_mm": fmt(self.hd95_mm), "assd_mm": fmt(self.assd_mm),
                "rel_bold_error": fmt(self.rel_bold_error), "flags": ";".join(self.flags)}


def evaluate_pair(v: Volume, y, yhat, spacing=None, **tags) -> MetricReport:
    """All metrics for one frame. Undefined metrics are None with a reason in ``flags``."""
    a, b = _masks(y, yhat)
    if spacing is None:
        spacing = v.spacing
    flags: List[str] = []
    hd = asd = rbe = None
    try:
        d_ab, d_ba = surface_distances(a, b, spacing)
        pooled = np.concatenate([d_ab, d_ba])
        hd = nearest_rank(pooled, 95)
        asd = float(pooled.mean())
    except EmptyMaskError as e:
        flags.append(e.code)
    try:
        rbe = rel_bold_error(v, a, b)
    except EmptyMaskError as e:
        if e.code not in flags:
            flags.append(e.code)
    return MetricReport(dice(a, b), hd, asd, rbe, int(a.sum()), int(b.sum()), int(np.sum(a & b)),
                        flags, **tags)


def write_csv(reports: Sequence[MetricReport], path) -> None:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow(r.row())
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("dice", "hd95_mm", "assd_mm", "rel_bold_error"):
            r[k] = float(r[k]) if r[k] != "" else None
        r["frame_index"] = int(r["frame_index"])
        r["flags"] = [f for f in r["flags"].split(";") if f]
    return rows


def summarize(values: Sequence[Optional[float]]) -> dict:
    """Mean/sd/median over defined values; flagged (None) entries are gaps, not zeros."""
    vals = np.array([x for x in values if x is not None and not math.isnan(x)], dtype=np.float64)
    if vals.size == 0:
        return {"n": 0, "mean": None, "sd": None, "median": None}
    return {"n": int(vals.size), "mean": float(vals.mean()), "sd": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "median": float(np.median(vals))}
