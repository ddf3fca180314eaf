"""Peak-suppression of template feature groups.

One channel group (the mask group) is attenuated around its most salient
location by a Gaussian-shaped mask; every other group is scaled down by a
shared coefficient ``alpha``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, channel_mean, elementwise, split_groups

DENSITY_NORMALIZED = "density_normalized"  # Gaussian scaled by 1/(2*pi*sigma^2)
PEAK_NORMALIZED = "peak_normalized"
MASK_MODES = (DENSITY_NORMALIZED, PEAK_NORMALIZED)


@dataclass
class SuppressionMask:
    grid: np.ndarray
    peak: tuple[int, int]
    sigma: float
    mode: str = PEAK_NORMALIZED


@dataclass
class GroupedTemplateFeatures:
    groups: list[Tensor]
    mask_group_index: int
    alpha: float
    compressed: list[Tensor] = field(default_factory=list)
    suppressed: list[Tensor] = field(default_factory=list)

    @property
    def n_groups(self) -> int:
        return len(self.groups)


def locate_peak(f_m: Tensor) -> tuple[int, int, Tensor]:
    """Channel-mean the group and return the (row, col) of its maximum.

    Ties resolve to the first cell in row-major order.
    """
    if f_m.ndim != 3:
        raise ValueError(f"locate_peak expects [C,H,W], got {f_m.shape}")
    compressed = channel_mean(f_m)
    flat = int(np.argmax(compressed.data[0]))
    w = compressed.shape[-1]
    return flat // w, flat % w, compressed


def build_mask(peak: tuple[int, int], height: int, width: int, sigma: float,
               mode: str = PEAK_NORMALIZED) -> SuppressionMask:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    i = np.arange(height, dtype=np.float64)[:, None]
    j = np.arange(width, dtype=np.float64)[None, :]
    d2 = (i - peak[0]) ** 2 + (j - peak[1]) ** 2
    bump = np.exp(-d2 / (2.0 * sigma * sigma))
    if mode == DENSITY_NORMALIZED:
        bump = bump / (2.0 * math.pi * sigma * sigma)
    return SuppressionMask(1.0 - bump, (int(peak[0]), int(peak[1])), float(sigma), mode)


def group_features(template: Tensor, n_groups: int, mask_group_index: int,
                   alpha: float) -> GroupedTemplateFeatures:
    if not 0 <= mask_group_index < n_groups:
        raise ValueError(f"mask group {mask_group_index} out of range for {n_groups} groups")
    return GroupedTemplateFeatures(split_groups(template, n_groups), mask_group_index, alpha)


def suppress(grouped: GroupedTemplateFeatures, mask: SuppressionMask | np.ndarray) -> list[Tensor]:
    """Mask the mask group, scale the rest by ``alpha``.

    ``mask`` may be a single ``SuppressionMask`` or, for batched groups, an
    array already shaped like the mask group.
    """
    if not 0.0 <= grouped.alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {grouped.alpha}")
    grid = mask.grid if isinstance(mask, SuppressionMask) else np.asarray(mask)
    out = []
    for k, g in enumerate(grouped.groups):
        if k == grouped.mask_group_index:
            if grid.shape != g.shape[-2:] and grid.shape != g.shape:
                raise ValueError(f"mask shape {grid.shape} does not match group {g.shape}")
            out.append(elementwise(g, grid, "mul"))
        else:
            out.append(elementwise(g, grouped.alpha, "mul"))
    grouped.suppressed = out
    return out


def suppress_template(template: Tensor, n_groups: int, mask_group_index: int, alpha: float,
                      sigma: float, mode: str = PEAK_NORMALIZED) -> GroupedTemplateFeatures:
    """Group, locate peak per sample, build masks and suppress. Accepts [C,H,W] or [B,C,H,W]."""
    grouped = group_features(template, n_groups, mask_group_index, alpha)
    grouped.compressed = [channel_mean(g) for g in grouped.groups]
    f_m = grouped.groups[mask_group_index]
    h, w = f_m.shape[-2:]
    if f_m.ndim == 3:
        r, c, _ = locate_peak(f_m)
        suppress(grouped, build_mask((r, c), h, w, sigma, mode))
        return grouped
    grids = np.empty(f_m.shape)
    mean_maps = f_m.data.mean(axis=1)
    for b in range(f_m.shape[0]):
        flat = int(np.argmax(mean_maps[b]))
        grids[b] = build_mask((flat // w, flat % w), h, w, sigma, mode).grid[None]
    suppress(grouped, grids)
    return grouped
