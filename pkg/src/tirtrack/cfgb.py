"""Cross-channel fine-grained feature blocks and the grouped suppression network.

A block splits its input channels, runs one part through a pointwise /
depthwise / pointwise transform and keeps the other part untouched, then
concatenates and applies a fixed channel permutation. The grouped network
(``Dccfg``) runs a shared stack of such blocks over every channel group of a
template, after one group has been peak-masked and the rest scaled by alpha.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import BatchNorm2d, Conv2d, Module
from .suppression import PEAK_NORMALIZED, GroupedTemplateFeatures, suppress_template
from .tensor import Tensor


def fit_groups(requested: int, *channels: int) -> int:
    """Largest group count <= ``requested`` dividing every channel count."""
    common = 0
    for c in channels:
        common = math.gcd(common, c)
    for g in range(min(requested, common), 0, -1):
        if common % g == 0:
            return g
    return 1


@dataclass
class CfgbConfig:
    channels: int
    c0: int | None = None
    stride: int = 1
    groups: int = 8

    def __post_init__(self):
        if self.channels < 2:
            raise ValueError(f"a block needs at least 2 channels, got {self.channels}")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.stride == 1:
            if self.c0 is None:
                self.c0 = self.channels // 2
            if not 0 < self.c0 < self.channels:
                raise ValueError(f"c0 must lie in (0, {self.channels}), got {self.c0}")
            convolved = (self.channels - self.c0,)
        else:
            if self.channels % 2:
                raise ValueError("downsampling blocks need an even channel count")
            self.c0 = None
            convolved = (self.channels, self.channels // 2)
        for c in convolved:
            if c % self.groups:
                raise ValueError(f"groups={self.groups} does not divide {c} convolved channels")

    @property
    def transform_channels(self) -> int:
        return self.channels - self.c0 if self.stride == 1 else self.channels // 2


@dataclass
class DccfgConfig:
    n_groups: int = 8
    alpha: float = 0.7
    sigma: float = 2.0
    mask_mode: str = PEAK_NORMALIZED
    blocks: int = 2
    groups: int = 8

    def __post_init__(self):
        if self.n_groups < 0:
            raise ValueError("n_groups must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    def block_config(self, channels: int) -> CfgbConfig:
        width = channels // self.n_groups if self.n_groups else channels
        if self.n_groups and channels % self.n_groups:
            raise ValueError(f"{channels} channels not divisible into {self.n_groups} groups")
        c0 = width // 2
        return CfgbConfig(width, c0, 1, fit_groups(self.groups, width - c0))


def pointwise_parameter_count(cin: int, cout: int, groups: int = 1, bias: bool = False) -> int:
    if cin % groups or cout % groups:
        raise ValueError(f"groups={groups} must divide {cin} and {cout}")
    return cin * cout // groups + (cout if bias else 0)


def count_parameters(cfg: CfgbConfig) -> int:
    """Exact learnable parameter count of one block (conv weights + BN scale/shift)."""
    g = cfg.groups
    if cfg.stride == 1:
        c1 = cfg.transform_channels
        pw = 2 * pointwise_parameter_count(c1, c1, g)
        dw = c1 * 9
        bn = 3 * 2 * c1
        return pw + dw + bn
    c, h = cfg.channels, cfg.channels // 2
    # branch A: dw(c) -> pw(c->h); branch B: pw(c->h) -> dw(h) -> pw(h->h)
    pw = pointwise_parameter_count(c, h, g) * 2 + pointwise_parameter_count(h, h, g)
    dw = c * 9 + h * 9
    bn = 2 * (c + h) + 2 * (h + h + h)
    return pw + dw + bn


def pointwise_count(cfg: CfgbConfig) -> int:
    """Weights held by the block's 1x1 layers only."""
    if cfg.stride == 1:
        c1 = cfg.transform_channels
        return 2 * pointwise_parameter_count(c1, c1, cfg.groups)
    c, h = cfg.channels, cfg.channels // 2
    return 2 * pointwise_parameter_count(c, h, cfg.groups) + pointwise_parameter_count(h, h, cfg.groups)


class CfgbBlock(Module):
    def __init__(self, cfg: CfgbConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.perm = rng.permutation(cfg.channels)
        g = cfg.groups
        if cfg.stride == 1:
            c1 = cfg.transform_channels
            self.pw1 = Conv2d(c1, c1, 1, rng, groups=g, bias=False)
            self.bn1 = BatchNorm2d(c1)
            self.dw = Conv2d(c1, c1, 3, rng, padding=1, groups=c1, bias=False)
            self.bn2 = BatchNorm2d(c1)
            self.pw2 = Conv2d(c1, c1, 1, rng, groups=g, bias=False)
            self.bn3 = BatchNorm2d(c1)
        else:
            c, h, s = cfg.channels, cfg.channels // 2, cfg.stride
            self.a_dw = Conv2d(c, c, 3, rng, stride=s, padding=1, groups=c, bias=False)
            self.a_bn1 = BatchNorm2d(c)
            self.a_pw = Conv2d(c, h, 1, rng, groups=g, bias=False)
            self.a_bn2 = BatchNorm2d(h)
            self.b_pw1 = Conv2d(c, h, 1, rng, groups=g, bias=False)
            self.b_bn1 = BatchNorm2d(h)
            self.b_dw = Conv2d(h, h, 3, rng, stride=s, padding=1, groups=h, bias=False)
            self.b_bn2 = BatchNorm2d(h)
            self.b_pw2 = Conv2d(h, h, 1, rng, groups=g, bias=False)
            self.b_bn3 = BatchNorm2d(h)

    def __call__(self, x: Tensor) -> Tensor:
        return cfgb_forward(x, self)


def cfgb_forward(x: Tensor, block: CfgbBlock) -> Tensor:
    cfg = block.cfg
    if x.shape[-3] != cfg.channels:
        raise ValueError(f"block expects {cfg.channels} channels, got {x.shape}")
    if cfg.stride == 1:
        keep, moved = T.split_channels(x, cfg.c0)
        y = T.relu(block.bn1(block.pw1(moved)))
        y = block.bn2(block.dw(y))
        y = T.relu(block.bn3(block.pw2(y)))
        out = T.concat_channels(keep, y)
    else:
        a = block.a_bn1(block.a_dw(x))
        a = T.relu(block.a_bn2(block.a_pw(a)))
        b = T.relu(block.b_bn1(block.b_pw1(x)))
        b = block.b_bn2(block.b_dw(b))
        b = T.relu(block.b_bn3(block.b_pw2(b)))
        out = T.concat_channels(a, b)
    return T.channel_shuffle(out, block.perm)


class Dccfg(Module):
    """Shared block stack applied group-wise to template and search features.

    With ``n_groups == 0`` the stack runs over all channels at once and no
    suppression is performed.
    """

    def __init__(self, channels: int, cfg: DccfgConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.channels = channels
        self.block_cfg = cfg.block_config(channels)
        self.blocks = [self.add_module(f"block{i}", CfgbBlock(self.block_cfg, rng))
                       for i in range(cfg.blocks)]

    @property
    def n_groups(self) -> int:
        return self.cfg.n_groups

    def _stack(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x

    def encode(self, x: Tensor) -> Tensor:
        """Run the stack on unsuppressed features (search branch, normal template)."""
        squeeze = x.ndim == 3
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        b, c, h, w = x.shape
        n = max(self.n_groups, 1)
        y = T.reshape(x, (b * n, c // n, h, w))
        y = self._stack(y)
        y = T.reshape(y, (b, c, h, w))
        return T.reshape(y, (c, h, w)) if squeeze else y

    def suppress(self, template: Tensor, mask_group_index: int) -> GroupedTemplateFeatures:
        c = self.cfg
        return suppress_template(template, c.n_groups, mask_group_index, c.alpha, c.sigma, c.mask_mode)


def dccfg_forward(grouped: GroupedTemplateFeatures, net: Dccfg) -> tuple[list[Tensor], list[Tensor]]:
    """Suppressed groups -> shared block stack -> (per-group outputs, their channel-mean maps)."""
    if not grouped.suppressed:
        raise ValueError("grouped features have not been suppressed")
    if grouped.n_groups != net.n_groups:
        raise ValueError(f"{grouped.n_groups} groups given, network built for {net.n_groups}")
    joined = T.cat(grouped.suppressed, axis=grouped.suppressed[0].ndim - 3)
    out = net.encode(joined)
    f_bar = T.split_groups(out, net.n_groups)
    f_s = [T.channel_mean(f) for f in f_bar]
    return f_bar, f_s
