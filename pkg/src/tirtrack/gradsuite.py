"""The finite-difference gradient suite: every differentiable op plus the full objective.

Each case builds fresh leaf tensors from a seeded generator and reduces the op
output against a fixed random weighting, so every output element contributes
to the checked scalar. Inputs to piecewise-linear ops are kept away from their
kinks so central differences never straddle one.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .cfgb import CfgbBlock, CfgbConfig, Dccfg, DccfgConfig, dccfg_forward
from .gradcheck import GradReport, check_gradients
from .losses import LossConfig, cls_loss, corr_matrix, dcfg_loss, reg_loss, total_loss
from .model import BBox, HeadOutput, SiamTracker, TrackerConfig, fuse_branches
from .nn import BatchNorm2d
from .suppression import suppress_template
from .tensor import Tensor

TOLERANCE = 1e-4
MIN_PROBES = 50


def _away_from_zero(rng, shape, lo=0.1, hi=1.0) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, w))


def _unary(op, data_fn):
    def build(rng):
        x = Tensor(data_fn(rng))
        w = rng.normal(size=op(Tensor(x.data.copy())).shape)
        return (lambda: _weighted(op(x), w)), [x]
    return build


def _binary(op, sa, sb, positive_b=False):
    def build(rng):
        a = Tensor(rng.normal(size=sa))
        b = Tensor(rng.uniform(0.5, 2.0, size=sb) if positive_b else rng.normal(size=sb))
        w = rng.normal(size=op(a, b).shape)
        return (lambda: _weighted(op(a, b), w)), [a, b]
    return build


def _conv(cin, cout, k, stride, padding, groups, bias=True, batch=2, hw=7):
    def build(rng):
        x = Tensor(rng.normal(size=(batch, cin, hw, hw)))
        wt = Tensor(rng.normal(size=(cout, cin // groups, k, k)))
        b = Tensor(rng.normal(size=cout)) if bias else None
        ins = [x, wt] + ([b] if bias else [])
        w = rng.normal(size=T.conv2d(x, wt, b, stride, padding, groups).shape)
        return (lambda: _weighted(T.conv2d(x, wt, b, stride, padding, groups), w)), ins
    return build


def _dw_xcorr(rng):
    z = Tensor(rng.normal(size=(2, 3, 3, 3)))
    x = Tensor(rng.normal(size=(2, 3, 7, 6)))
    w = rng.normal(size=(2, 3, 5, 4))
    return (lambda: _weighted(T.dw_xcorr(z, x), w)), [z, x]


def _batch_norm(training):
    def build(rng):
        bn = BatchNorm2d(3)
        x = Tensor(rng.normal(size=(4, 3, 3, 3)))
        bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[:] = rng.normal(size=3)
        rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, 3)
        w = rng.normal(size=x.shape)

        def fn():
            return _weighted(T.batch_norm(x, bn.gamma, bn.beta, rm.copy(), rv.copy(), training), w)
        return fn, [x, bn.gamma, bn.beta]
    return build


def _suppress(rng):
    # distinct peak so perturbations never move the argmax
    data = rng.normal(size=(2, 8, 5, 5)) * 0.1
    data[0, 2:4, 1, 3] += 3.0
    data[1, 2:4, 4, 0] += 3.0
    x = Tensor(data)
    w = rng.normal(size=(2, 8, 5, 5))

    def fn():
        g = suppress_template(x, 4, 1, 0.7, 2.0)
        return T.add(_weighted(T.cat(g.suppressed, axis=1), w),
                     T.tsum(T.cat(g.compressed, axis=1)))
    return fn, [x]


def _cfgb(stride):
    def build(rng):
        blk = CfgbBlock(CfgbConfig(8, None if stride == 1 else 0, stride, 2), rng)
        x = Tensor(rng.normal(size=(3, 8, 6, 6)))
        w = rng.normal(size=blk(x).shape)
        return (lambda: _weighted(blk(x), w)), [x] + blk.parameters()
    return build


def _dccfg(rng):
    net = Dccfg(8, DccfgConfig(n_groups=2, blocks=1, groups=2), rng)
    data = rng.normal(size=(2, 8, 5, 5)) * 0.1
    data[:, 4:8, 2, 2] += 3.0
    x = Tensor(data)
    w = rng.normal(size=(2, 8, 5, 5))

    def fn():
        f_bar, f_s = dccfg_forward(net.suppress(x, 1), net)
        return T.add(_weighted(T.cat(f_bar, axis=1), w), T.tsum(T.cat(f_s, axis=1)))
    return fn, [x] + net.parameters()


def _fuse(rng):
    outs = [HeadOutput(Tensor(rng.normal(size=(1, 3, 3))), Tensor(rng.normal(size=(4, 3, 3)))) for _ in range(3)]
    logits = Tensor(rng.normal(size=3))
    w1, w2 = rng.normal(size=(1, 3, 3)), rng.normal(size=(4, 3, 3))

    def fn():
        h = fuse_branches(outs, logits)
        return T.add(_weighted(h.cls, w1), _weighted(h.reg, w2))
    return fn, [logits] + [o.cls for o in outs] + [o.reg for o in outs]


def _cls_loss(rng):
    x = Tensor(rng.normal(size=(2, 1, 4, 4)) * 2)
    labels = rng.choice([-1.0, 0.0, 1.0], size=x.shape)
    labels[0, 0, 0, 0] = 1.0
    return (lambda: cls_loss(x, labels)), [x]


def _reg_loss(rng):
    # predictions overlap the gt box without sharing any edge coordinate
    gt = np.array([[10.0, 11.0, 20.0, 23.0], [5.0, 6.0, 15.0, 12.0]])
    off = _away_from_zero(rng, (2, 4, 3, 3), 0.2, 2.0)
    p = Tensor(gt[:, :, None, None] + off)
    mask = rng.random((2, 1, 3, 3)) < 0.6
    mask[0, 0, 1, 1] = True
    return (lambda: reg_loss(p, gt, mask, 1.0, 1.0, 32.0)), [p]


def _corr(rng):
    fs = [Tensor(rng.normal(size=(2, 1, 4, 4))) for _ in range(3)]
    w = rng.normal(size=(2, 3, 3))
    return (lambda: _weighted(corr_matrix(fs), w)), fs


def _dcfg(rng):
    fs = [Tensor(rng.normal(size=(2, 1, 4, 4))) for _ in range(4)]
    return (lambda: dcfg_loss(fs)), fs


def toy_tracker_config() -> TrackerConfig:
    """A 32x32-search toy model small enough for exhaustive probing."""
    return TrackerConfig(template_size=16, search_size=32, widths=(4, 8), strides=(2, 2), channels=8,
                         branches=2, dccfg=DccfgConfig(n_groups=2, blocks=1, groups=2))


def _total_loss(rng):
    cfg = toy_tracker_config()
    model = SiamTracker(cfg, seed=int(rng.integers(1 << 31)))
    model.train()
    z = Tensor(rng.random((2, 1, 16, 16)))
    x = Tensor(rng.random((2, 1, 32, 32)))
    z.data[:, 0, 7:9, 7:9] += 2.0
    gts = [BBox(15.0, 16.5, 9.0, 7.0), BBox(18.0, 13.0, 6.0, 8.0)]
    lcfg = LossConfig()

    def fn():
        out = model.forward_train(z, x, mask_group_index=1)
        return total_loss(out.groups, out.norm, out.f_s, gts, cfg, lcfg).total
    return fn, model.parameters()


def cases() -> dict[str, Callable]:
    sq = (3, 4)
    return {
        "add": _binary(T.add, sq, (4,)),
        "sub": _binary(T.sub, sq, sq),
        "mul": _binary(T.mul, sq, (3, 1)),
        "div": _binary(T.div, sq, sq, positive_b=True),
        "power": _unary(lambda a: T.power(a, 3.0), lambda r: r.normal(size=sq)),
        "elementwise_mul_mask": _binary(lambda a, b: T.elementwise(a, b, "mul"), (2, 3, 4, 5), (4, 5)),
        "elementwise_add_same": _binary(lambda a, b: T.elementwise(a, b, "add"), (3, 4, 5), (3, 4, 5)),
        "exp": _unary(T.exp, lambda r: r.normal(size=sq)),
        "log": _unary(T.log, lambda r: r.uniform(0.5, 2.0, size=sq)),
        "sigmoid": _unary(T.sigmoid, lambda r: 3 * r.normal(size=sq)),
        "sqrt": _unary(T.sqrt, lambda r: r.uniform(0.5, 2.0, size=sq)),
        "relu": _unary(T.relu, lambda r: _away_from_zero(r, sq)),
        "absolute": _unary(T.absolute, lambda r: _away_from_zero(r, sq)),
        "clip": _unary(lambda a: T.clip(a, -0.5, 0.5), lambda r: 0.5 + _away_from_zero(r, sq, 0.05, 1.0)),
        "minimum": _unary(lambda a: T.minimum(a, 0.0), lambda r: _away_from_zero(r, sq)),
        "maximum": _unary(lambda a: T.maximum(a, 0.0), lambda r: _away_from_zero(r, sq)),
        "sum_axis": _unary(lambda a: T.tsum(a, axis=1, keepdims=True), lambda r: r.normal(size=sq)),
        "mean": _unary(lambda a: T.tmean(a, axis=0), lambda r: r.normal(size=sq)),
        "reshape": _unary(lambda a: T.reshape(a, (2, 6)), lambda r: r.normal(size=sq)),
        "transpose": _unary(lambda a: T.transpose(a, (2, 0, 1)), lambda r: r.normal(size=(2, 3, 4))),
        "matmul": _binary(T.matmul, (2, 3, 4), (2, 4, 5)),
        "take": _unary(lambda a: T.take(a, (np.array([0, 2, 2, 1]), np.array([3, 0, 0, 1]))), lambda r: r.normal(size=sq)),
        "cat": _binary(lambda a, b: T.cat([a, b], axis=1), (2, 3), (2, 4)),
        "stack": _binary(lambda a, b: T.stack([a, b], axis=1), sq, sq),
        "channel_shuffle": _unary(lambda a: T.channel_shuffle(a, [2, 0, 3, 1]), lambda r: r.normal(size=(2, 4, 3, 3))),
        "split_channels": _unary(lambda a: T.cat(list(T.split_channels(a, 1))[::-1], axis=1),
                                 lambda r: r.normal(size=(2, 4, 3, 3))),
        "split_groups": _unary(lambda a: T.cat(T.split_groups(a, 2)[::-1], axis=0), lambda r: r.normal(size=(4, 3, 3))),
        "concat_channels": _binary(T.concat_channels, (2, 3, 2, 2), (2, 1, 2, 2)),
        "channel_mean": _unary(T.channel_mean, lambda r: r.normal(size=(2, 4, 3, 3))),
        "conv2d_dense": _conv(3, 4, 3, 1, 1, 1),
        "conv2d_grouped_strided": _conv(4, 6, 3, 2, 1, 2),
        "conv2d_depthwise": _conv(4, 4, 3, 2, 1, 4, bias=False),
        "conv2d_pointwise_grouped": _conv(4, 8, 1, 1, 0, 2),
        "dw_xcorr": _dw_xcorr,
        "batch_norm_train": _batch_norm(True),
        "batch_norm_eval": _batch_norm(False),
        "suppression": _suppress,
        "cfgb_stride1": _cfgb(1),
        "cfgb_stride2": _cfgb(2),
        "dccfg": _dccfg,
        "fuse_branches": _fuse,
        "cls_loss": _cls_loss,
        "reg_loss": _reg_loss,
        "corr_matrix": _corr,
        "dcfg_loss": _dcfg,
        "total_loss_toy_model": _total_loss,
    }


def run_suite(probes: int = 60, seed: int = 0, names=None) -> list[GradReport]:
    if probes < 1:
        raise ValueError("probes must be positive")
    reports = []
    for i, (name, build) in enumerate(cases().items()):
        if names and name not in names:
            continue
        rng = np.random.default_rng([seed, i])
        fn, inputs = build(rng)
        reports.append(check_gradients(fn, inputs, probes=probes, rng=rng, name=name))
    return reports
