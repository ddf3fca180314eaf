"""Precision, normalized precision and success (overlap) AUC."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .model import BBox

PRECISION_THRESHOLD = 20.0
NP_POINTS = 51  # thresholds 0, 0.01, ..., 0.5
NP_MAX = 0.5
SUCCESS_POINTS = 21  # thresholds 0, 0.05, ..., 1.0


def _check(pred: Sequence[BBox], gt: Sequence[BBox]) -> None:
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    if not gt:
        raise ValueError("empty box lists")


def center_errors(pred, gt) -> np.ndarray:
    _check(pred, gt)
    return np.array([math.hypot(p.cx - g.cx, p.cy - g.cy) for p, g in zip(pred, gt)])


def normalized_errors(pred, gt) -> np.ndarray:
    _check(pred, gt)
    out = []
    for p, g in zip(pred, gt):
        if not (g.w > 0 and g.h > 0):
            raise ValueError(f"degenerate ground truth {g}")
        out.append(math.hypot((p.cx - g.cx) / g.w, (p.cy - g.cy) / g.h))
    return np.array(out)


def ious(pred, gt) -> np.ndarray:
    _check(pred, gt)
    out = []
    for p, g in zip(pred, gt):
        ax1, ay1, ax2, ay2 = p.corners()
        bx1, by1, bx2, by2 = g.corners()
        iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
        ih = max(0.0, min(ay2, by2) - max(ay1, by1))
        inter = iw * ih
        out.append(inter / (p.w * p.h + g.w * g.h - inter))
    return np.array(out)


def precision(pred, gt, threshold: float = PRECISION_THRESHOLD) -> float:
    return float(np.mean(center_errors(pred, gt) <= threshold))


def np_thresholds() -> np.ndarray:
    return np.arange(NP_POINTS) / 100.0


def norm_precision(pred, gt) -> float:
    """Area under the normalized-precision curve on [0, 0.5], rescaled to [0, 1].

    The curve is sampled at 51 points and integrated with a left Riemann sum.
    """
    d = normalized_errors(pred, gt)
    t = np_thresholds()[:-1]
    curve = (d[None, :] <= t[:, None]).mean(axis=1)
    return float(curve.sum() * (NP_MAX / (NP_POINTS - 1)) / NP_MAX)


def success_thresholds() -> np.ndarray:
    return np.arange(SUCCESS_POINTS) / 20.0


def success_curve(pred, gt) -> np.ndarray:
    """Fraction of frames with IoU >= t; the t = 1 point counts IoU > 1 only, i.e. never."""
    o = ious(pred, gt)
    t = success_thresholds()
    curve = (o[None, :] >= t[:, None]).mean(axis=1)
    curve[-1] = float(np.mean(o > 1.0))
    return curve


def success_auc(pred, gt) -> float:
    return float(success_curve(pred, gt).mean())


def frame_weighted_mean(values: Sequence[float], frames: Sequence[int]) -> float:
    v = np.asarray(values, dtype=np.float64)
    f = np.asarray(frames, dtype=np.float64)
    return float((v * f).sum() / f.sum())
