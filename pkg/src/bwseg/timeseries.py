"""Whole-series analyses: frame-to-frame consistency, phase sensitivity and
the hyperoxia response of the mean masked signal."""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from .volgrid import BoldSeries, LabelMap

log = logging.getLogger(__name__)


@dataclass
class SeriesPrediction:
    """Masks for the analyzed frames of a series; ``empty`` marks flagged frames."""

    indices: List[int]
    masks: List[LabelMap]
    empty: List[bool]

    def __post_init__(self):
        if not (len(self.indices) == len(self.masks) == len(self.empty)):
            raise ValueError("indices, masks and flags must have equal length")
        if list(self.indices) != sorted(set(self.indices)):
            raise ValueError("analyzed frame indices must be strictly increasing")

    @classmethod
    def from_labels(cls, series: BoldSeries, stride: int = 1) -> "SeriesPrediction":
        """Ground-truth masks at every ``stride``-th labeled frame."""
        idx = [t for t in range(0, series.T, stride) if t in series.labels]
        masks = [series.labels[t] for t in idx]
        return cls(idx, masks, [m.count() == 0 for m in masks])


def analyzed_indices(T: int, stride: int = 2) -> List[int]:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(0, T, stride))


def segment_series(net, series: BoldSeries, stride: int = 2, input_dims=None, threads: int = 1,
                   normalize: bool = True) -> SeriesPrediction:
    """Independent eval-mode segmentation of frames 0, stride, 2*stride, ..."""
    from .unet import segment

    idx = analyzed_indices(series.T, stride)
    run = lambda t: segment(net, series.frames[t], input_dims, normalize)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, idx))
    else:
        results = [run(t) for t in idx]
    for t, r in zip(idx, results):
        if r.empty:
            log.warning("frame %d of %s: empty prediction", t, series.subject_id)
    return SeriesPrediction(idx, [r.label for r in results], [r.empty for r in results])


@dataclass
class PairRecord:
    t0: int
    t1: int
    dice: Optional[float]
    hd95_mm: Optional[float]
    assd_mm: Optional[float]
    bold_diff: Optional[float]
    flags: List[str] = field(default_factory=list)


@dataclass
class ConsistencyReport:
    pairs: List[PairRecord]
    summary: Dict[str, dict]
    excluded: List[int]

    def to_dict(self) -> dict:
        return {"pairs": [p.__dict__ for p in self.pairs], "summary": self.summary, "excluded": self.excluded}


def consistency(series: BoldSeries, pred: SeriesPrediction) -> ConsistencyReport:
    """Metrics between each consecutive pair of analyzed frames.

    The BOLD difference is |b1 - b0| / b0 with b_t the mean of frame t over
    its own mask. Pairs touching an empty-prediction frame carry None values.
    """
    if len(pred.indices) < 2:
        raise ValueError("consistency needs at least two analyzed frames")
    pairs = []
    for k in range(len(pred.indices) - 1):
        t0, t1 = pred.indices[k], pred.indices[k + 1]
        if pred.empty[k] or pred.empty[k + 1]:
            pairs.append(PairRecord(t0, t1, None, None, None, None, ["empty_prediction"]))
            continue
        m0, m1 = pred.masks[k].mask, pred.masks[k + 1].mask
        d_ab, d_ba = metrics.surface_distances(m0, m1, series.spacing)
        pooled = np.concatenate([d_ab, d_ba])
        b0 = metrics.masked_mean(series.frames[t0], m0)
        b1 = metrics.masked_mean(series.frames[t1], m1)
        pairs.append(PairRecord(t0, t1, metrics.dice(m0, m1), metrics.nearest_rank(pooled, 95),
                                float(pooled.mean()), abs(b1 - b0) / abs(b0)))
    summary = {k: metrics.summarize([getattr(p, k) for p in pairs])
               for k in ("dice", "hd95_mm", "assd_mm", "bold_diff")}
    excluded = [t for t, e in zip(pred.indices, pred.empty) if e]
    return ConsistencyReport(pairs, summary, excluded)


@dataclass
class OxygenationReport:
    b_N: float
    b_H: float
    delta_b: float
    trace: List[Optional[float]]
    indices: List[int]
    phases: List[str]
    baseline_frames: List[int]
    plateau_frames: List[int]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def oxygenation_response(series: BoldSeries, pred: SeriesPrediction, plateau: int = 10,
                         baseline_window: Optional[int] = None) -> OxygenationReport:
    """Fractional change |b_H - b_N| / b_N of the mean masked signal.

    b_N averages the per-frame masked means over the analyzed normoxic
    frames before hyperoxia (optionally only the last ``baseline_window`` of
    them); b_H averages the last ``plateau`` analyzed hyperoxic frames.
    Empty-prediction frames are gaps and never enter either mean.
    """
    trace: List[Optional[float]] = []
    for t, m, e in zip(pred.indices, pred.masks, pred.empty):
        trace.append(None if e else metrics.masked_mean(series.frames[t], m))
    phases = [series.phase(t) for t in pred.indices]
    base = [t for t, ph, b in zip(pred.indices, phases, trace) if ph == "normoxic" and b is not None]
    hyper = [t for t, ph, b in zip(pred.indices, phases, trace) if ph == "hyperoxic" and b is not None]
    if baseline_window is not None:
        base = base[-baseline_window:]
    if not base:
        raise ValueError("no analyzed normoxic baseline frames")
    if len(hyper) < plateau:
        raise ValueError(f"only {len(hyper)} analyzed hyperoxic frames; need {plateau} "
                         f"(pass a smaller plateau window)")
    hyper = hyper[-plateau:]
    value = dict(zip(pred.indices, trace))
    b_N = float(np.mean([value[t] for t in base]))
    b_H = float(np.mean([value[t] for t in hyper]))
    return OxygenationReport(b_N, b_H, abs(b_H - b_N) / b_N, trace, list(pred.indices), phases, base, hyper)


@dataclass
class SensitivityReport:
    """Per subject, per metric absolute normoxic/hyperoxic difference."""

    per_subject: Dict[str, Dict[str, Optional[float]]]
    skipped: List[str]

    def mean(self, metric: str) -> Optional[float]:
        vals = [d[metric] for d in self.per_subject.values() if d.get(metric) is not None]
        return float(np.mean(vals)) if vals else None


SENSITIVITY_METRICS = ("dice", "hd95_mm", "assd_mm", "rel_bold_error")


def phase_sensitivity(reports: Sequence[metrics.MetricReport]) -> SensitivityReport:
    """|m_normoxic - m_hyperoxic| per subject, averaging within a phase first."""
    by_subject: Dict[str, Dict[str, List[metrics.MetricReport]]] = {}
    for r in reports:
        if r.phase in ("normoxic", "hyperoxic"):
            by_subject.setdefault(r.subject_id, {}).setdefault(r.phase, []).append(r)
    out, skipped = {}, []
    for sid in sorted(by_subject):
        phases = by_subject[sid]
        if len(phases) < 2:
            log.info("subject %s has labels in one phase only; skipped", sid)
            skipped.append(sid)
            continue
        row = {}
        for m in SENSITIVITY_METRICS:
            means = []
            for ph in ("normoxic", "hyperoxic"):
                vals = [getattr(r, m) for r in phases[ph] if getattr(r, m) is not None]
                means.append(float(np.mean(vals)) if vals else None)
            row[m] = None if None in means else abs(means[0] - means[1])
        out[sid] = row
    return SensitivityReport(out, skipped)


def write_trace_csv(series: BoldSeries, pred: SeriesPrediction, report: OxygenationReport,
                    cons: Optional[ConsistencyReport], path) -> None:
    """Columns: frame, phase, mean_signal, dice_prev (blank where undefined)."""
    dice_prev = {}
    if cons is not None:
        dice_prev = {p.t1: p.dice for p in cons.pairs}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "phase", "mean_signal", "dice_prev"])
        for t, ph, b in zip(report.indices, report.phases, report.trace):
            dp = dice_prev.get(t)
            w.writerow([t, ph, "" if b is None else repr(b), "" if dp is None else repr(dp)])
