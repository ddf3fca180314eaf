"""Tracking, regression and group-diversity objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import BBox, HeadOutput, TrackerConfig, cell_centers
from .tensor import Tensor

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
IGNORE = -1


@dataclass
class LossConfig:
    mu: float = 4.0
    lambda_g: float = 1.0
    lambda_1: float = 1.0
    eps_corr: float = 1e-8
    pos_radius: float = 1.0
    use_dcfg_loss: bool = True

    def __post_init__(self):
        if self.mu < 0 or self.lambda_g < 0 or self.lambda_1 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    total: Tensor
    l_cfgb: Tensor
    l_norm: Tensor
    l_dcfg: Tensor
    l_cls: float
    l_reg: float
    mu: float

    def values(self) -> dict[str, float]:
        return {
            "total": self.total.item(),
            "l_cfgb": self.l_cfgb.item(),
            "l_norm": self.l_norm.item(),
            "l_dcfg": self.l_dcfg.item(),
        }


def _zero() -> Tensor:
    return Tensor(0.0)


def cls_loss(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy over non-ignored cells (label -1 = ignore)."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape != logits.shape:
        raise ValueError(f"labels {labels.shape} vs logits {logits.shape}")
    valid = labels != IGNORE
    n = int(valid.sum())
    if n == 0:
        raise ValueError("every cell is ignored")
    y = np.where(valid, labels, 0.0)
    p = T.clip(T.sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = T.mul(T.log(p), y)
    neg = T.mul(T.log(T.sub(1.0, p)), 1.0 - y)
    per_cell = T.mul(T.add(pos, neg), -1.0)
    return T.div(T.tsum(T.mul(per_cell, valid.astype(np.float64))), float(n))


def box_iou(a, b) -> float:
    """IoU of two corner-form boxes (x1, y1, x2, y2)."""
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def reg_loss(pred_boxes: Tensor, gt_box, positive_mask, lambda_g: float = 1.0,
             lambda_1: float = 1.0, scale: float = 1.0) -> Tensor:
    """Mean over positive cells of ``lambda_g*(1-IoU) + lambda_1*L1``.

    ``pred_boxes`` holds corner-form boxes ``[..., 4, H, W]``; ``gt_box`` is
    ``[..., 4]`` (one box per sample); L1 is the mean absolute corner
    difference divided by ``scale``.
    """
    mask = np.asarray(positive_mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        log.warning("reg_loss: no positive cells, returning 0")
        return _zero()
    gt = np.asarray(gt_box, dtype=np.float64)[..., :, None, None]
    g = [gt[..., k:k + 1, :, :] for k in range(4)]
    px1, py1, px2, py2 = T.split_groups(pred_boxes, 4)
    iw = T.clip(T.sub(T.minimum(px2, g[2]), T.maximum(px1, g[0])), lo=0.0)
    ih = T.clip(T.sub(T.minimum(py2, g[3]), T.maximum(py1, g[1])), lo=0.0)
    inter = T.mul(iw, ih)
    area_p = T.mul(T.sub(px2, px1), T.sub(py2, py1))
    area_g = (g[2] - g[0]) * (g[3] - g[1])
    union = T.sub(T.add(area_p, area_g), inter)
    iou = T.div(inter, union)
    l1 = None
    for p, q in zip((px1, py1, px2, py2), g):
        d = T.absolute(T.sub(p, q))
        l1 = d if l1 is None else T.add(l1, d)
    l1 = T.mul(l1, 1.0 / (4.0 * scale))
    per_cell = T.add(T.mul(T.sub(1.0, iou), lambda_g), T.mul(l1, lambda_1))
    return T.div(T.tsum(T.mul(per_cell, mask.astype(np.float64))), float(n))


def assign_labels(gt: BBox, geom: TrackerConfig, radius: float) -> np.ndarray:
    """0/1 label map ``[1, M, M]`` for a gt box given in search-crop coordinates."""
    centers = cell_centers(geom)
    m = len(centers)
    s = geom.total_stride
    ci = int(np.clip(round((gt.cy - centers[0]) / s), 0, m - 1))
    cj = int(np.clip(round((gt.cx - centers[0]) / s), 0, m - 1))
    ii, jj = np.mgrid[0:m, 0:m]
    return (((ii - ci) ** 2 + (jj - cj) ** 2) <= radius * radius + 1e-12).astype(np.float64)[None]


def pred_corners(reg: Tensor, geom: TrackerConfig) -> Tensor:
    centers = cell_centers(geom)
    gx = centers[None, :]
    gy = centers[:, None]
    l, t, r, b = T.split_groups(reg, 4)
    return T.cat([T.sub(gx, l), T.sub(gy, t), T.add(r, gx), T.add(b, gy)], axis=reg.ndim - 3)


def _batch_gt(gt: BBox | Sequence[BBox]) -> list[BBox]:
    return [gt] if isinstance(gt, BBox) else list(gt)


def track_loss(head: HeadOutput, gt: BBox | Sequence[BBox], geom: TrackerConfig,
               cfg: LossConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Classification + regression loss; returns (sum, cls part, reg part)."""
    boxes = _batch_gt(gt)
    labels = np.stack([assign_labels(b, geom, cfg.pos_radius) for b in boxes])
    corners = np.array([b.corners() for b in boxes])
    if head.cls.ndim == 3:
        labels, corners = labels[0], corners[0]
    lc = cls_loss(head.cls, labels)
    lr = reg_loss(pred_corners(head.reg, geom), corners, labels > 0,
                  cfg.lambda_g, cfg.lambda_1, scale=float(geom.search_size))
    return T.add(lc, lr), lc, lr


def corr_matrix(f_s: Sequence[Tensor], eps: float = 1e-8) -> Tensor:
    """Pearson correlation between the flattened maps (population statistics).

    Maps are ``[..., 1, H, W]``; the result is ``[..., N, N]``.
    """
    if not f_s:
        raise ValueError("no maps")
    shape = f_s[0].shape
    if any(f.shape != shape for f in f_s):
        raise ValueError("maps differ in shape")
    x = T.cat(list(f_s), axis=len(shape) - 3)
    lead = x.shape[:-2]
    p = shape[-1] * shape[-2]
    x = T.reshape(x, lead + (p,))
    xc = T.sub(x, T.tmean(x, axis=-1, keepdims=True))
    axes = list(range(xc.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    cov = T.mul(T.matmul(xc, T.transpose(xc, axes)), 1.0 / p)
    sd = T.sqrt(T.tmean(T.mul(xc, xc), axis=-1, keepdims=True))
    denom = T.add(T.matmul(sd, T.transpose(sd, axes)), eps)
    return T.div(cov, denom)


def dcfg_loss(f_s: Sequence[Tensor], eps: float = 1e-8) -> Tensor:
    """Frobenius distance of the group correlation matrix from identity (batch-averaged)."""
    n = len(f_s)
    if n < 2:
        return _zero()
    c = corr_matrix(f_s, eps)
    d = T.sub(c, np.eye(n))
    sq = T.tsum(T.mul(d, d), axis=(-2, -1))
    return T.tmean(T.sqrt(sq))


def total_loss(group_heads: Sequence[Sequence[HeadOutput]], norm_head: HeadOutput,
               f_s: Sequence[Sequence[Tensor]], gt, geom: TrackerConfig,
               cfg: LossConfig) -> LossBreakdown:
    """Sum of per-group tracking losses + mu * normal tracking loss + diversity loss.

    ``group_heads`` and ``f_s`` hold one list per head branch; branches are
    summed with equal weight. Empty lists disable the fine-grained terms.
    """
    l_norm, lc, lr = track_loss(norm_head, gt, geom, cfg)
    l_cls, l_reg = lc.item(), lr.item()
    l_cfgb = _zero()
    for heads in group_heads:
        for h in heads:
            l_cfgb = T.add(l_cfgb, track_loss(h, gt, geom, cfg)[0])
    l_dcfg = _zero()
    if cfg.use_dcfg_loss:
        for maps in f_s:
            l_dcfg = T.add(l_dcfg, dcfg_loss(maps, cfg.eps_corr))
    total = T.add(T.add(l_cfgb, T.mul(l_norm, cfg.mu)), l_dcfg)
    return LossBreakdown(total, l_cfgb, l_norm, l_dcfg, l_cls, l_reg, cfg.mu)
