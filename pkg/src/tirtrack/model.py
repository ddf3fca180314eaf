"""Desk-scale Siamese tracker.

Backbone taps -> per-branch 1x1 neck -> grouped block stack (optional) ->
depthwise cross-correlation -> anchor-free classification / (l,t,r,b) heads ->
softmax-weighted fusion over branches.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .cfgb import Dccfg, DccfgConfig, dccfg_forward
from .nn import BatchNorm2d, Conv2d, Module
from .rng import stream
from .tensor import Tensor, dw_xcorr, no_grad


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate box {self}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2) -> "BBox":
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


@dataclass
class HeadOutput:
    cls: Tensor
    reg: Tensor

    def __post_init__(self):
        if self.cls.shape[-2:] != self.reg.shape[-2:]:
            raise ValueError(f"cls {self.cls.shape} and reg {self.reg.shape} differ spatially")


@dataclass
class TrackerConfig:
    template_size: int = 32
    search_size: int = 64
    widths: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (2, 2, 1)
    channels: int = 32
    branches: int = 1
    fusion_logits: tuple[float, ...] | None = None
    dccfg: DccfgConfig = field(default_factory=DccfgConfig)
    use_dccfg: bool = True
    inference_suppression: bool = False
    size_smoothing: float = 0.3
    context: float = 4.0

    def __post_init__(self):
        if isinstance(self.dccfg, dict):
            self.dccfg = DccfgConfig(**self.dccfg)
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)
        if self.search_size <= self.template_size:
            raise ValueError("search size must exceed template size")
        if self.branches < 1:
            raise ValueError("need at least one head branch")
        if len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must have equal length")
        if self.branches > len(self.widths):
            raise ValueError(f"{self.branches} branches but only {len(self.widths)} backbone stages")
        if self.fusion_logits is not None:
            self.fusion_logits = tuple(self.fusion_logits)
            if len(self.fusion_logits) != self.branches:
                raise ValueError("one fusion logit per branch")
        if self.template_size % self.total_stride or self.search_size % self.total_stride:
            raise ValueError(f"crop sizes must be divisible by the backbone stride {self.total_stride}")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def response_size(self) -> int:
        s = self.total_stride
        return self.search_size // s - self.template_size // s + 1


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Backbone(Module):
    """3x3 conv / BN / ReLU stages; stands in for a large pretrained network."""

    def __init__(self, widths, strides, rng):
        super().__init__()
        self.stages = []
        cin = 1
        for i, (w, s) in enumerate(zip(widths, strides)):
            conv = self.add_module(f"conv{i}", Conv2d(cin, w, 3, rng, stride=s, padding=1, bias=False))
            bn = self.add_module(f"bn{i}", BatchNorm2d(w))
            self.stages.append((conv, bn))
            cin = w
        self.total_stride = int(np.prod(strides))

    def taps(self, x: Tensor) -> list[Tensor]:
        out = []
        for conv, bn in self.stages:
            x = T.relu(bn(conv(x)))
            out.append(x)
        return out


def backbone_forward(image_patch: Tensor, backbone: Backbone) -> Tensor:
    h, w = image_patch.shape[-2:]
    s = backbone.total_stride
    if h % s or w % s:
        raise ValueError(f"patch {h}x{w} not divisible by backbone stride {s}")
    return backbone.taps(image_patch)[-1]


class Head(Module):
    """Two conv towers over the correlation map: logits and positive (l,t,r,b)."""

    def __init__(self, channels: int, rng, reg_scale: float, prior: float = 0.1):
        super().__init__()
        self.cls1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.cls2 = Conv2d(channels, 1, 1, rng)
        self.reg1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.reg2 = Conv2d(channels, 4, 1, rng)
        self.cls2.weight.data *= 0.1
        self.reg2.weight.data *= 0.1
        self.cls2.bias.data[:] = -math.log((1 - prior) / prior)
        self.reg2.bias.data[:] = math.log(2.0)
        self.reg_scale = reg_scale

    def __call__(self, corr: Tensor) -> HeadOutput:
        return head_forward(corr, self)


def head_forward(corr: Tensor, head: Head) -> HeadOutput:
    cls = head.cls2(T.relu(head.cls1(corr)))
    raw = head.reg2(T.relu(head.reg1(corr)))
    reg = T.mul(T.exp(raw), head.reg_scale)
    return HeadOutput(cls, reg)


def softmax(logits: Tensor) -> Tensor:
    e = T.exp(T.sub(logits, float(logits.data.max())))
    return T.div(e, T.tsum(e))


def fuse_branches(outputs: list[HeadOutput], weights) -> HeadOutput:
    """Convex combination of branch outputs; ``weights`` are logits (softmaxed here)."""
    if not outputs:
        raise ValueError("nothing to fuse")
    w = softmax(T.as_tensor(weights))
    if w.shape != (len(outputs),):
        raise ValueError(f"{len(outputs)} branches but weights of shape {w.shape}")
    for o in outputs[1:]:
        if o.cls.shape != outputs[0].cls.shape or o.reg.shape != outputs[0].reg.shape:
            raise ValueError("branch outputs differ in shape")
    if len(outputs) == 1:
        return outputs[0]
    cls = reg = None
    for b, o in enumerate(outputs):
        wb = w[b]
        c, r = T.mul(o.cls, wb), T.mul(o.reg, wb)
        cls = c if cls is None else T.add(cls, c)
        reg = r if reg is None else T.add(reg, r)
    return HeadOutput(cls, reg)


class Branch(Module):
    def __init__(self, tap_width: int, tap_stride: int, cfg: TrackerConfig, rng):
        super().__init__()
        self.neck = Conv2d(tap_width, cfg.channels, 1, rng, stride=tap_stride, bias=False)
        self.neck_bn = BatchNorm2d(cfg.channels)
        if cfg.use_dccfg:
            self.dccfg = Dccfg(cfg.channels, cfg.dccfg, rng)
        else:
            object.__setattr__(self, "dccfg", None)
        self.head = Head(cfg.channels, rng, reg_scale=float(cfg.total_stride))

    def project(self, tap: Tensor) -> Tensor:
        return self.neck_bn(self.neck(tap))

    def encode(self, feat: Tensor) -> Tensor:
        return self.dccfg.encode(feat) if self.dccfg is not None else feat


@dataclass
class TrainForward:
    norm: HeadOutput
    groups: list[list[HeadOutput]]
    f_s: list[list[Tensor]]


class SiamTracker(Module):
    def __init__(self, cfg: TrackerConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = stream(seed, "init")
        self.backbone = Backbone(cfg.widths, cfg.strides, rng)
        self.branches: list[Branch] = []
        cum = np.cumprod(cfg.strides)
        first_tap = len(cfg.widths) - cfg.branches
        for b in range(cfg.branches):
            stage = first_tap + b
            tap_stride = cfg.total_stride // int(cum[stage])
            self.branches.append(self.add_module(
                f"branch{b}", Branch(cfg.widths[stage], tap_stride, cfg, rng)))
        logits = cfg.fusion_logits or (0.0,) * cfg.branches
        self.fusion = Tensor(np.array(logits, dtype=np.float64), requires_grad=True)
        self.corr_scale = 1.0 / (cfg.template_size // cfg.total_stride) ** 2

    # -- feature extraction ----------------------------------------------
    def branch_features(self, patch: Tensor) -> list[Tensor]:
        taps = self.backbone.taps(patch)[-self.cfg.branches:]
        return [br.project(t) for br, t in zip(self.branches, taps)]

    def correlate(self, z: Tensor, x: Tensor) -> Tensor:
        return T.mul(dw_xcorr(z, x), self.corr_scale)

    @property
    def grouped(self) -> bool:
        return self.cfg.use_dccfg and self.cfg.dccfg.n_groups >= 1

    def forward_train(self, z_patch: Tensor, x_patch: Tensor, mask_group_index: int = 0) -> TrainForward:
        """Normal (unsuppressed) head plus, when grouping is active, one head per group."""
        zs = self.branch_features(z_patch)
        xs = self.branch_features(x_patch)
        norm_heads, group_heads, f_s_all = [], [], []
        for br, z, x in zip(self.branches, zs, xs):
            xe = br.encode(x)
            norm_heads.append(br.head(self.correlate(br.encode(z), xe)))
            if not self.grouped:
                continue
            n = br.dccfg.n_groups
            grouped = br.dccfg.suppress(z, mask_group_index)
            f_bar, f_s = dccfg_forward(grouped, br.dccfg)
            corr = self.correlate(T.cat(f_bar, axis=f_bar[0].ndim - 3), xe)
            heads = []
            width = corr.shape[-3] // n
            for k in range(n):
                sel = np.zeros(corr.shape)
                sel[..., k * width:(k + 1) * width, :, :] = float(n)
                heads.append(br.head(T.mul(corr, sel)))
            group_heads.append(heads)
            f_s_all.append(f_s)
        return TrainForward(fuse_branches(norm_heads, self.fusion), group_heads, f_s_all)

    def template_features(self, z_patch: Tensor) -> list[Tensor]:
        out = []
        for br, z in zip(self.branches, self.branch_features(z_patch)):
            if self.cfg.inference_suppression and self.grouped:
                grouped = br.dccfg.suppress(z, 0)
                f_bar, _ = dccfg_forward(grouped, br.dccfg)
                out.append(T.cat(f_bar, axis=f_bar[0].ndim - 3))
            else:
                out.append(br.encode(z))
        return out

    def respond(self, z_feats: list[Tensor], x_patch: Tensor) -> HeadOutput:
        xs = self.branch_features(x_patch)
        outs = [br.head(self.correlate(z, br.encode(x))) for br, z, x in zip(self.branches, z_feats, xs)]
        return fuse_branches(outs, self.fusion)

    def diversity_maps(self, z_patch: Tensor, probe_groups: int) -> np.ndarray:
        """Channel-mean maps of contiguous channel groups of the encoded template (first branch)."""
        z = self.branch_features(z_patch)[0]
        feat = self.branches[0].encode(z)
        return np.stack([g.data[..., 0, :, :] for g in map(T.channel_mean, T.split_groups(feat, probe_groups))],
                        axis=-3)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def cell_centers(cfg: TrackerConfig) -> np.ndarray:
    """Crop-pixel coordinate of every response cell along one axis."""
    m = cfg.response_size
    return (cfg.search_size - 1) / 2 + cfg.total_stride * (np.arange(m) - (m - 1) / 2)


def decode_box(reg_at_cell, cx: float, cy: float) -> BBox:
    l, t, r, b = (float(v) for v in reg_at_cell)
    return BBox.from_corners(cx - l, cy - t, cx + r, cy + b)


def crop(frame: np.ndarray, cx: float, cy: float, size: int, fill: float | None = None) -> tuple[np.ndarray, int, int]:
    """Integer crop of ``size`` pixels centred on (cx, cy); outside pixels take ``fill`` (frame mean)."""
    h, w = frame.shape
    fill = float(frame.mean()) if fill is None else fill
    x0 = int(round(cx - (size - 1) / 2))
    y0 = int(round(cy - (size - 1) / 2))
    out = np.full((size, size), fill)
    sx0, sy0 = max(x0, 0), max(y0, 0)
    sx1, sy1 = min(x0 + size, w), min(y0 + size, h)
    if sx1 > sx0 and sy1 > sy0:
        out[sy0 - y0:sy1 - y0, sx0 - x0:sx1 - x0] = frame[sy0:sy1, sx0:sx1]
    return out, x0, y0


class Tracker:
    """Single-target inference state around a trained ``SiamTracker``."""

    def __init__(self, model: SiamTracker):
        self.model = model
        self.cfg = model.cfg
        self.box: BBox | None = None
        self.z_feats: list[Tensor] | None = None
        self.last_response: HeadOutput | None = None

    def init(self, frame: np.ndarray, box: BBox) -> None:
        patch, _, _ = crop(frame, box.cx, box.cy, self.cfg.template_size)
        self.model.eval()
        with no_grad():
            self.z_feats = self.model.template_features(Tensor(patch[None, None]))
        self.box = box

    def step(self, frame: np.ndarray) -> tuple[BBox, float]:
        return track_step(self, frame)


def track_step(tracker: Tracker, frame: np.ndarray) -> tuple[BBox, float]:
    cfg = tracker.cfg
    prev = tracker.box
    if prev is None or tracker.z_feats is None:
        raise RuntimeError("tracker not initialised")
    if not (prev.w > 0 and prev.h > 0 and math.isfinite(prev.cx) and math.isfinite(prev.cy)):
        raise ValueError(f"degenerate previous box {prev}")
    fh, fw = frame.shape
    cx = min(max(prev.cx, 0.0), fw - 1.0)
    cy = min(max(prev.cy, 0.0), fh - 1.0)
    patch, x0, y0 = crop(frame, cx, cy, cfg.search_size)
    with no_grad():
        out = tracker.model.respond(tracker.z_feats, Tensor(patch[None, None]))
    tracker.last_response = out
    cls = out.cls.data[0, 0]
    flat = int(np.argmax(cls))
    i, j = divmod(flat, cls.shape[1])
    centers = cell_centers(cfg)
    px, py = x0 + centers[j], y0 + centers[i]
    raw = decode_box(out.reg.data[0, :, i, j], px, py)
    k = cfg.size_smoothing
    w = prev.w + k * (raw.w - prev.w)
    h = prev.h + k * (raw.h - prev.h)
    x1, y1 = max(raw.cx - w / 2, 0.0), max(raw.cy - h / 2, 0.0)
    x2, y2 = min(raw.cx + w / 2, float(fw)), min(raw.cy + h / 2, float(fh))
    if x2 - x1 < 1.0:
        x1, x2 = (x1, x1 + 1.0) if x1 + 1.0 <= fw else (fw - 1.0, float(fw))
    if y2 - y1 < 1.0:
        y1, y2 = (y1, y1 + 1.0) if y1 + 1.0 <= fh else (fh - 1.0, float(fh))
    box = BBox.from_corners(x1, y1, x2, y2)
    score = 1.0 / (1.0 + math.exp(-float(cls[i, j])))
    tracker.box = box
    return box, score
