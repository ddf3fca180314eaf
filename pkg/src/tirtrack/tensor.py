"""Dense float64 tensor with reverse-mode differentiation.

Only the operations the tracker needs are provided. Every op records a node
(parents + backward closure) when any input requires a gradient; ``backward``
walks the recorded graph in reverse topological order and accumulates into the
``grad`` slots.

Channel-oriented ops treat axis ``-3`` as the channel axis, so both ``[C,H,W]``
and ``[B,C,H,W]`` layouts work.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the recorded graph (non-scalar backward, double backward)."""


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor created from non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"
        self._consumed = False

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # -- differentiation --------------------------------------------------
    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._consumed = False
    out.op = op
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Fill ``grad`` of every reachable tensor with d(loss)/d(tensor)."""
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor requiring grad")
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf: accumulate
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    loss._consumed = True
    # release closures so the graph can be collected
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), bw, "div")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def elementwise(x: Tensor, rhs, kind: str) -> Tensor:
    """Multiply or add with a scalar, an ``[H,W]`` mask, or a same-shape tensor.

    Any other broadcast is rejected.
    """
    if kind not in ("mul", "add"):
        raise ValueError(f"unknown elementwise kind {kind!r}")
    r = rhs if isinstance(rhs, Tensor) else None
    rshape = r.shape if r is not None else np.shape(rhs)
    ok = (
        rshape == ()
        or rshape == x.shape
        or (len(rshape) == 2 and x.ndim >= 2 and x.shape[-2:] == rshape)
    )
    if not ok:
        raise ValueError(f"cannot broadcast {rshape} against {x.shape}")
    return mul(x, rhs) if kind == "mul" else add(x, rhs)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if (ad <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sigmoid(a: Tensor) -> Tensor:
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def sqrt(a: Tensor) -> Tensor:
    """Square root; the derivative at 0 is taken as 0 (not infinity)."""
    ad = a.data
    if (ad < 0).any():
        raise NonFiniteError("sqrt of negative value")
    out = np.sqrt(ad)

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make(out, (a,), bw, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def absolute(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def clip(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    lo_ = -np.inf if lo is None else lo
    hi_ = np.inf if hi is None else hi
    inside = (a.data >= lo_) & (a.data <= hi_)
    return _make(np.clip(a.data, lo_, hi_), (a,), lambda g: (g * inside,), "clip")


def minimum(a: Tensor, c) -> Tensor:
    """Elementwise min against a constant array; ties route the gradient to ``a``."""
    c = np.asarray(c, dtype=np.float64)
    sel = a.data <= c
    return _make(np.where(sel, a.data, c), (a,),
                 lambda g: (_unbroadcast(g * sel, a.shape),), "minimum")


def maximum(a: Tensor, c) -> Tensor:
    c = np.asarray(c, dtype=np.float64)
    sel = a.data >= c
    return _make(np.where(sel, a.data, c), (a,),
                 lambda g: (_unbroadcast(g * sel, a.shape),), "maximum")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[ax] for ax in np.atleast_1d(axis)]))
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes batch)."""
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape),
                _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape))

    return _make(ad @ bd, (a, b), bw, "matmul")


def take(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _make(np.array(a.data[idx], dtype=np.float64), (a,), bw, "take")


def cat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bw, "cat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(tensors)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), bw, "stack")


# ---------------------------------------------------------------------------
# channel operations
# ---------------------------------------------------------------------------

def _check_chw(x: Tensor, what: str) -> None:
    if x.ndim not in (3, 4):
        raise ValueError(f"{what}: expected [C,H,W] or [B,C,H,W], got {x.shape}")


def channel_shuffle(x: Tensor, perm) -> Tensor:
    _check_chw(x, "channel_shuffle")
    c = x.shape[-3]
    perm = np.asarray(perm)
    if perm.shape != (c,) or not np.array_equal(np.sort(perm), np.arange(c)):
        raise ValueError(f"channel_shuffle: {perm.tolist()} is not a permutation of 0..{c - 1}")
    inv = np.argsort(perm)
    return _make(x.data[..., perm, :, :], (x,), lambda g: (g[..., inv, :, :],), "channel_shuffle")


def _channel_slice(x: Tensor, lo: int, hi: int) -> Tensor:
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[..., lo:hi, :, :] = g
        return (out,)

    return _make(x.data[..., lo:hi, :, :].copy(), (x,), bw, "channel_slice")


def split_channels(x: Tensor, c0: int) -> tuple[Tensor, Tensor]:
    _check_chw(x, "split_channels")
    c = x.shape[-3]
    if not 0 < c0 < c:
        raise ValueError(f"split_channels: need 0 < c0 < {c}, got {c0}")
    return _channel_slice(x, 0, c0), _channel_slice(x, c0, c)


def split_groups(x: Tensor, n: int) -> list[Tensor]:
    """Contiguous channel blocks: group k owns channels [kC/n, (k+1)C/n)."""
    c = x.shape[-3]
    if n < 1 or c % n:
        raise ValueError(f"{c} channels cannot be divided into {n} groups")
    step = c // n
    return [_channel_slice(x, k * step, (k + 1) * step) for k in range(n)]


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_chw(a, "concat_channels")
    _check_chw(b, "concat_channels")
    if a.shape[-3] == 0 or b.shape[-3] == 0:
        raise ValueError("concat_channels: empty channel block")
    if a.ndim != b.ndim or a.shape[:-3] != b.shape[:-3] or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels: spatial/batch mismatch {a.shape} vs {b.shape}")
    return cat([a, b], axis=a.ndim - 3)


def channel_mean(x: Tensor) -> Tensor:
    _check_chw(x, "channel_mean")
    if x.shape[-3] < 1:
        raise ValueError("channel_mean: no channels")
    return tmean(x, axis=x.ndim - 3, keepdims=True)


# ---------------------------------------------------------------------------
# convolution, correlation, normalization
# ---------------------------------------------------------------------------

def _as4d(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 3 else x


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Grouped 2-D cross-correlation. ``weight`` is ``[C_out, C_in/groups, k, k]``."""
    _check_chw(x, "conv2d")
    squeeze = x.ndim == 3
    xd = _as4d(x.data)
    bsz, cin, h, w = xd.shape
    cout, cig, kh, kw = weight.shape
    if stride < 1 or kh < 1 or kh != kw:
        raise ValueError(f"conv2d: bad kernel {weight.shape} or stride {stride}")
    if groups < 1 or cin % groups or cout % groups:
        raise ValueError(f"conv2d: groups={groups} must divide C_in={cin} and C_out={cout}")
    if cig != cin // groups:
        raise ValueError(f"conv2d: kernel expects {cig * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    k = kh
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {k} too large for input {h}x{w} with padding {padding}")
    if k == 1 and padding == 0:
        return _pointwise_conv(x, weight, bias, stride, groups, squeeze, ho, wo)
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    g_ = groups
    cog = cout // g_
    depthwise = cig == 1 and cog == 1
    wd = weight.data
    wg = wd.reshape(g_, cog, cig, k, k)
    # contiguous per-tap weight matrices so matmul can dispatch to BLAS
    wt = np.ascontiguousarray(wg.transpose(3, 4, 0, 1, 2))
    wtt = np.ascontiguousarray(wt.transpose(0, 1, 2, 4, 3))

    # channel-major layout [C, B, H, W]: each tap becomes one [g, c, B*pixels] matrix
    xc = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    n = bsz * ho * wo

    def rows(di: int, dj: int) -> tuple[slice, slice]:
        return (slice(di, di + stride * (ho - 1) + 1, stride), slice(dj, dj + stride * (wo - 1) + 1, stride))

    # shift-and-accumulate: one small product per kernel tap instead of an im2col copy
    oc = np.zeros((g_, cog, n))
    taps = {}
    for di in range(k):
        for dj in range(k):
            r, c = rows(di, dj)
            xt = np.ascontiguousarray(xc[:, :, r, c]).reshape(g_, cig, n)
            taps[di, dj] = xt
            if depthwise:
                oc += wt[di, dj] * xt
            else:
                oc += np.matmul(wt[di, dj], xt)
    out = oc.reshape(cout, bsz, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def bw(gout):
        g4 = _as4d(gout)
        gc = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(g_, cog, n)
        gw = np.empty((k, k, g_, cog, cig))
        gxc = np.zeros(xc.shape)
        for di in range(k):
            for dj in range(k):
                r, c = rows(di, dj)
                xt = taps[di, dj]
                if depthwise:
                    gw[di, dj] = (gc * xt).sum(axis=-1, keepdims=True)
                    gxc[:, :, r, c] += (wt[di, dj] * gc).reshape(cin, bsz, ho, wo)
                else:
                    gw[di, dj] = np.matmul(gc, xt.transpose(0, 2, 1))
                    gxc[:, :, r, c] += np.matmul(wtt[di, dj], gc).reshape(cin, bsz, ho, wo)
        gxp = gxc.transpose(1, 0, 2, 3)
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gx = np.ascontiguousarray(gx)
        if squeeze:
            gx = gx[0]
        gb = g4.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw.transpose(2, 3, 4, 0, 1).reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "conv2d")


def _pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, groups: int,
                    squeeze: bool, ho: int, wo: int) -> Tensor:
    """1x1 convolution as a batched matrix product (no im2col)."""
    xd = _as4d(x.data)
    bsz, cin, h, w = xd.shape
    cout = weight.shape[0]
    cig, cog = cin // groups, cout // groups
    xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
    xg = np.ascontiguousarray(xs).reshape(bsz, groups, cig, ho * wo)
    wg = weight.data.reshape(groups, cog, cig)
    out = np.matmul(wg[None], xg).reshape(bsz, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def bw(gout):
        gg = _as4d(gout).reshape(bsz, groups, cog, ho * wo)
        gw = np.matmul(gg, xg.transpose(0, 1, 3, 2)).sum(axis=0)
        gxs = np.matmul(wg.transpose(0, 2, 1)[None], gg).reshape(bsz, cin, ho, wo)
        if stride > 1:
            gx = np.zeros(xd.shape)
            gx[:, :, ::stride, ::stride] = gxs
        else:
            gx = gxs
        if squeeze:
            gx = gx[0]
        gb = gg.sum(axis=(0, 3)).reshape(cout) if bias is not None else None
        return gx, gw.reshape(weight.shape), gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, parents, bw, "conv2d")


def dw_xcorr(template: Tensor, search: Tensor) -> Tensor:
    """Per-channel valid cross-correlation of ``template`` over ``search``."""
    _check_chw(template, "dw_xcorr")
    _check_chw(search, "dw_xcorr")
    if template.ndim != search.ndim or template.shape[:-2] != search.shape[:-2]:
        raise ValueError(f"dw_xcorr: channel/batch mismatch {template.shape} vs {search.shape}")
    ht, wt = template.shape[-2:]
    hs, ws = search.shape[-2:]
    if ht > hs or wt > ws:
        raise ValueError(f"dw_xcorr: template {ht}x{wt} larger than search {hs}x{ws}")
    squeeze = template.ndim == 3
    td, sd = _as4d(template.data), _as4d(search.data)
    win = sliding_window_view(sd, (ht, wt), axis=(2, 3))
    out = np.einsum("bcijkl,bckl->bcij", win, td, optimize=True)
    ho, wo = out.shape[-2:]

    def bw(g):
        g4 = _as4d(g)
        gt = np.einsum("bcijkl,bcij->bckl", win, g4, optimize=True)
        gs = np.zeros(sd.shape)
        if ht * wt <= ho * wo:
            for k in range(ht):
                for l in range(wt):
                    gs[:, :, k:k + ho, l:l + wo] += g4 * td[:, :, k:k + 1, l:l + 1]
        else:
            for i in range(ho):
                for j in range(wo):
                    gs[:, :, i:i + ht, j:j + wt] += g4[:, :, i:i + 1, j:j + 1] * td
        if squeeze:
            return gt[0], gs[0]
        return gt, gs

    return _make(out[0] if squeeze else out, (template, search), bw, "dw_xcorr")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool,
               momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel normalization over batch and spatial positions.

    In training mode the running statistics are updated in place (the running
    variance uses the unbiased estimate).
    """
    _check_chw(x, "batch_norm")
    squeeze = x.ndim == 3
    xd = _as4d(x.data)
    bsz, c, h, w = xd.shape
    m = bsz * h * w
    if h * w == 0:
        raise ValueError("batch_norm: zero spatial extent")
    gd = gamma.data[None, :, None, None]
    bd = beta.data[None, :, None, None]
    if training:
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        unbiased = var * m / max(m - 1, 1)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gd + bd

    def bw(g):
        g4 = _as4d(g)
        ggamma = (g4 * xhat).sum(axis=(0, 2, 3))
        gbeta = g4.sum(axis=(0, 2, 3))
        dxhat = g4 * gd
        if training:
            gx = (inv_std[None, :, None, None] / m) * (
                m * dxhat
                - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = dxhat * inv_std[None, :, None, None]
        return (gx[0] if squeeze else gx), ggamma, gbeta

    return _make(out[0] if squeeze else out, (x, gamma, beta), bw, "batch_norm")
