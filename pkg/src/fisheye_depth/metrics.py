"""Depth evaluation metrics (Abs Rel, Sq Rel, RMSE, RMSE log, delta thresholds)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyMask, NonPositiveGroundTruth

DEFAULT_CLAMP = (0.3, 80.0)
METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")


@dataclass(frozen=True)
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    n_pixels: int

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in METRIC_NAMES)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        header = " ".join(f"{name:>10}" for name in METRIC_NAMES + ("n_pixels",))
        row = " ".join(f"{v:10.4f}" for v in self.as_tuple()) + f" {self.n_pixels:10d}"
        return header + "\n" + row


def _mean(x: np.ndarray) -> float:
    return float(np.ascontiguousarray(x).sum() / x.size)


def compute_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: np.ndarray | None = None,
    clamp: tuple[float, float] | None = DEFAULT_CLAMP,
    median_scale: bool = False,
) -> MetricReport:
    """Compare a predicted distance map against ground truth.

    Pixels count when they are in ``mask`` and ``gt`` is finite; with a clamp
    ``(lo, hi)``, ground truth must also lie in ``(0, hi]`` and predictions
    are clipped to ``[lo, hi]``. ``median_scale`` rescales predictions by
    ``median(gt) / median(pred)`` first, for scale-ambiguous baselines.

    Raises:
        EmptyMask: no pixel survives the filters.
        NonPositiveGroundTruth: a masked ground-truth value is <= 0 (only
            checked when no clamp filters such pixels out).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    select = np.isfinite(gt)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise DimensionMismatch(f"mask {mask.shape} vs gt {gt.shape}")
        select &= mask
    if clamp is not None:
        lo, hi = clamp
        select &= (gt > 0) & (gt <= hi)
    elif np.any(gt[select] <= 0):
        raise NonPositiveGroundTruth("ground truth has non-positive values inside the mask")
    if not select.any():
        raise EmptyMask("no valid pixels to evaluate")
    g = gt[select]
    p = pred[select]
    if median_scale:
        p = p * (np.median(g) / np.median(p))
    if clamp is not None:
        p = np.clip(p, lo, hi)

    diff = p - g
    thresh = np.maximum(p / g, g / p)
    return MetricReport(
        abs_rel=_mean(np.abs(diff) / g),
        sq_rel=_mean(diff * diff / g),
        rmse=float(np.sqrt(_mean(diff * diff))),
        rmse_log=float(np.sqrt(_mean((np.log(p) - np.log(g)) ** 2))),
        delta1=_mean(thresh < 1.25),
        delta2=_mean(thresh < 1.25**2),
        delta3=_mean(thresh < 1.25**3),
        n_pixels=int(g.size),
    )


def combine_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Pixel-count-weighted combination of reports over disjoint masks.

    Exact for the mean-based metrics; RMSE terms are combined through their
    squares.
    """
    if not reports:
        raise EmptyMask("no reports to combine")
    n = sum(r.n_pixels for r in reports)
    w = [r.n_pixels / n for r in reports]

    def avg(name):
        return sum(wi * getattr(r, name) for wi, r in zip(w, reports))

    return MetricReport(
        abs_rel=avg("abs_rel"),
        sq_rel=avg("sq_rel"),
        rmse=float(np.sqrt(sum(wi * r.rmse**2 for wi, r in zip(w, reports)))),
        rmse_log=float(np.sqrt(sum(wi * r.rmse_log**2 for wi, r in zip(w, reports)))),
        delta1=avg("delta1"),
        delta2=avg("delta2"),
        delta3=avg("delta3"),
        n_pixels=n,
    )
