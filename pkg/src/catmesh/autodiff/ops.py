"""Differentiable operations over :class:`Tensor`.

Every op computes its value eagerly with numpy and, when any input lives on
a tape, records a closure that maps the output gradient to input gradients.
Elementwise ops follow numpy broadcasting; gradients are summed back to each
input's shape.
"""
from __future__ import annotations

import builtins
import math

import numpy as np
import scipy.sparse as sp

from .tape import Tensor, as_tensor, common_tape

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _operands(a, b):
    """Operand arrays. Mixed float widths resolve to the narrower one, and a bare
    Python scalar takes its partner's dtype, so constants never upcast f32 data."""
    da, db = _data(a), _data(b)
    if isinstance(b, (int, float)) and da.dtype.kind == "f":
        db = db.astype(da.dtype)
    elif isinstance(a, (int, float)) and db.dtype.kind == "f":
        da = da.astype(db.dtype)
    elif da.dtype.kind == db.dtype.kind == "f" and da.dtype != db.dtype:
        if da.itemsize > db.itemsize:
            da = da.astype(db.dtype)
        else:
            db = db.astype(da.dtype)
    return da, db


def _emit(out, inputs, backward):
    tape = common_tape(inputs)
    if tape is None:
        return Tensor(out)
    return tape.record(out, inputs, backward)


def _needs(x) -> bool:
    return isinstance(x, Tensor) and x.node is not None


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    da, db = _operands(a, b)
    out = da + db

    def backward(g):
        return unbroadcast(g, da.shape), unbroadcast(g, db.shape)

    return _emit(out, (a, b), backward)


def sub(a, b) -> Tensor:
    da, db = _operands(a, b)
    out = da - db

    def backward(g):
        return unbroadcast(g, da.shape), unbroadcast(-g, db.shape)

    return _emit(out, (a, b), backward)


def mul(a, b) -> Tensor:
    da, db = _operands(a, b)
    out = da * db

    def backward(g):
        ga = unbroadcast(g * db, da.shape) if _needs(a) else None
        gb = unbroadcast(g * da, db.shape) if _needs(b) else None
        return ga, gb

    return _emit(out, (a, b), backward)


def div(a, b) -> Tensor:
    da, db = _operands(a, b)
    out = da / db

    def backward(g):
        ga = unbroadcast(g / db, da.shape) if _needs(a) else None
        gb = unbroadcast(-g * out / db, db.shape) if _needs(b) else None
        return ga, gb

    return _emit(out, (a, b), backward)


def neg(a) -> Tensor:
    return _emit(-_data(a), (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    da = _data(a)
    out = da ** p
    return _emit(out, (a,), lambda g: (g * p * da ** (p - 1),))


def exp(a) -> Tensor:
    out = np.exp(_data(a))
    return _emit(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    da = _data(a)
    return _emit(np.log(da), (a,), lambda g: (g / da,))


def sqrt(a) -> Tensor:
    out = np.sqrt(_data(a))
    return _emit(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    da = _data(a)
    return _emit(np.sin(da), (a,), lambda g: (g * np.cos(da),))


def cos(a) -> Tensor:
    da = _data(a)
    return _emit(np.cos(da), (a,), lambda g: (-g * np.sin(da),))


def tanh(a) -> Tensor:
    out = np.tanh(_data(a))
    return _emit(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    da = _data(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * da))
    return _emit(out, (a,), lambda g: (g * out * (1.0 - out),))


def abs(a) -> Tensor:
    da = _data(a)
    return _emit(np.abs(da), (a,), lambda g: (g * np.sign(da),))


def maximum(a, floor: float) -> Tensor:
    """``max(a, floor)`` against a constant; gradient flows where ``a > floor``."""
    da = _data(a)
    return _emit(np.maximum(da, floor), (a,), lambda g: (g * (da > floor),))


def clip(a, lo: float, hi: float) -> Tensor:
    da = _data(a)
    inside = (da > lo) & (da < hi)
    return _emit(np.clip(da, lo, hi), (a,), lambda g: (g * inside,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    dx = _data(x)
    u = GELU_C * (dx + GELU_A * dx * dx * dx)
    th = np.tanh(u)
    out = 0.5 * dx * (1.0 + th)

    def backward(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * dx * dx)
        return (g * (0.5 * (1.0 + th) + 0.5 * dx * (1.0 - th * th) * du),)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False) -> Tensor:
    da = _data(a)
    out = np.sum(da, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, da.shape).copy(),)

    return _emit(out, (a,), backward)


def mean(a, axis=None, keepdims=False) -> Tensor:
    da = _data(a)
    n = da.size if axis is None else int(np.prod([da.shape[i] for i in np.atleast_1d(axis)]))
    out = np.mean(da, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, da.shape).copy(),)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------- shape ops

def reshape(a, shape) -> Tensor:
    da = _data(a)
    return _emit(da.reshape(shape), (a,), lambda g: (g.reshape(da.shape),))


def transpose(a, axes=None) -> Tensor:
    da = _data(a)
    if axes is None:
        axes = tuple(reversed(range(da.ndim)))
    inv = np.argsort(axes)
    return _emit(np.transpose(da, axes), (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    axes = list(range(_data(a).ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return builtins.all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def getitem(a, index) -> Tensor:
    da = _data(a)
    out = da[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(da, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _emit(out, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit(out, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    datas = [_data(t) for t in tensors]
    out = np.stack(datas, axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(datas)))

    return _emit(out, tuple(tensors), backward)


# ---------------------------------------------------------------- linear algebra

def _matmul_grads(a: np.ndarray, b: np.ndarray, g: np.ndarray):
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return ga, gb


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    da, db = _operands(a, b)
    if da.ndim < 2 or db.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {da.shape} and {db.shape}")
    if da.shape[-1] != db.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {da.shape} @ {db.shape}")
    out = da @ db

    def backward(g):
        ga, gb = _matmul_grads(da, db, g)
        return unbroadcast(ga, da.shape), unbroadcast(gb, db.shape)

    return _emit(out, (a, b), backward)


# ---------------------------------------------------------------- fused nn ops

def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    dx, dgam, dbet = _data(x), _data(gamma), _data(beta)
    C = dx.shape[-1]
    if dgam.shape != (C,) or dbet.shape != (C,):
        raise ValueError(f"layer_norm: channel mismatch, x {dx.shape} gamma {dgam.shape} beta {dbet.shape}")
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    mu = dx.mean(axis=-1, keepdims=True)
    xc = dx - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * dgam + dbet

    def backward(g):
        gx = None
        if _needs(x):
            gh = g * dgam
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        ggam = unbroadcast(g * xhat, dgam.shape) if _needs(gamma) else None
        gbet = unbroadcast(g, dbet.shape) if _needs(beta) else None
        return gx, ggam, gbet

    return _emit(out, (x, gamma, beta), backward)


def softmax(x, axis: int = -1) -> Tensor:
    dx = _data(x)
    if not -dx.ndim <= axis < dx.ndim:
        raise ValueError(f"softmax: axis {axis} invalid for shape {dx.shape}")
    z = dx - dx.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), backward)


def conv_transpose2d(x, kernel, stride: int) -> Tensor:
    """Transposed convolution with output exactly ``stride`` times the input.

    ``x`` is ``[..., C, H, W]``, ``kernel`` is ``[C, C_out, k, k]``. Padding is
    ``(k - stride) / 2`` on every side, so ``k = 2 * stride`` (padding
    ``stride / 2``) and ``k = stride`` (no padding) are both valid; ``k`` must be a
    multiple of ``stride``.
    """
    dx, dk = _data(x), _data(kernel)
    if stride < 1:
        raise ValueError("conv_transpose2d: stride must be >= 1")
    C, C_out, k, k2 = dk.shape
    if k != k2:
        raise ValueError("conv_transpose2d: kernel must be square")
    if dx.shape[-3] != C:
        raise ValueError(f"conv_transpose2d: input has {dx.shape[-3]} channels, kernel expects {C}")
    if k < stride or k % stride or (k - stride) % 2:
        raise ValueError(f"conv_transpose2d: kernel {k} incompatible with stride {stride}")
    s, m = stride, k // stride
    pad = (k - s) // 2
    lead = dx.shape[:-3]
    H, W = dx.shape[-2:]
    xb = dx.reshape((-1, C, H * W))
    N = xb.shape[0]
    # Kernel tap (a*s + r, b*s + q) of input pixel (h, w) lands on output pixel
    # ((h + a)*s + r, (w + b)*s + q). Accumulating per output phase (r, q) turns the
    # overlap-add into m*m dense block adds.
    kmat = dk.reshape(C, C_out, m, s, m, s).transpose(0, 1, 2, 4, 3, 5).reshape(C, -1)
    taps = (kmat.T @ xb).reshape(N, C_out, m, m, s, s, H, W)
    phase = np.zeros((N, C_out, s, s, H + m - 1, W + m - 1), dtype=taps.dtype)
    for a in range(m):
        for b in range(m):
            phase[..., a:a + H, b:b + W] += taps[:, :, a, b]
    FH, FW = (H + m - 1) * s, (W + m - 1) * s
    full = phase.transpose(0, 1, 4, 2, 5, 3).reshape(N, C_out, FH, FW)
    out = full[:, :, pad:pad + H * s, pad:pad + W * s].reshape(lead + (C_out, H * s, W * s))

    def backward(g):
        gfull = np.zeros((N, C_out, FH, FW), dtype=g.dtype)
        gfull[:, :, pad:pad + H * s, pad:pad + W * s] = g.reshape(N, C_out, H * s, W * s)
        gphase = gfull.reshape(N, C_out, H + m - 1, s, W + m - 1, s).transpose(0, 1, 3, 5, 2, 4)
        gtaps = np.empty((N, C_out, m, m, s, s, H, W), dtype=g.dtype)
        for a in range(m):
            for b in range(m):
                gtaps[:, :, a, b] = gphase[..., a:a + H, b:b + W]
        gtaps = gtaps.reshape(N, -1, H * W)
        gx = gk = None
        if _needs(x):
            gx = (kmat @ gtaps).reshape(dx.shape)
        if _needs(kernel):
            gk2 = np.matmul(xb, gtaps.transpose(0, 2, 1)).sum(0)
            gk = gk2.reshape(C, C_out, m, m, s, s).transpose(0, 1, 2, 4, 3, 5).reshape(dk.shape)
        return gx, gk

    return _emit(out, (x, kernel), backward)


def bilinear_sample(fmap, points) -> Tensor:
    """Sample ``fmap [..., C, H, W]`` at ``points [..., P, 2]`` -> ``[..., P, C]``.

    Points are ``(x, y)`` in pixel units with sample ``(row i, col j)`` located
    at ``(x=j, y=i)`` (align-corners). Out-of-range points are clamped to the
    border; the gradient w.r.t. a clamped coordinate is zero.
    """
    dm, dp = _data(fmap), _data(points)
    lead = dm.shape[:-3]
    if dp.shape[:-2] != lead or dp.shape[-1] != 2:
        raise ValueError(f"bilinear_sample: map {dm.shape} incompatible with points {dp.shape}")
    C, H, W = dm.shape[-3:]
    P = dp.shape[-2]
    B = int(np.prod(lead, dtype=np.int64))
    pts = dp.reshape(B, P, 2)
    x = np.clip(pts[..., 0], 0.0, W - 1.0)
    y = np.clip(pts[..., 1], 0.0, H - 1.0)
    # non-finite points index cell 0 but keep NaN weights so the output is NaN
    x0 = np.minimum(np.floor(np.nan_to_num(x)), max(W - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(np.nan_to_num(y)), max(H - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    wx = x - x0.astype(x.dtype)
    wy = y - y0.astype(y.dtype)
    base = (np.arange(B) * (H * W))[:, None]
    i00 = base + y0 * W + x0
    i01 = base + y0 * W + x1
    i10 = base + y1 * W + x0
    i11 = base + y1 * W + x1
    w00 = (1 - wx) * (1 - wy)
    w01 = wx * (1 - wy)
    w10 = (1 - wx) * wy
    w11 = wx * wy
    rows = np.repeat(np.arange(B * P), 4)
    cols = np.stack([i00, i01, i10, i11], axis=-1).reshape(-1)
    vals = np.stack([w00, w01, w10, w11], axis=-1).reshape(-1).astype(dm.dtype, copy=False)
    S = sp.csr_matrix((vals, (rows, cols)), shape=(B * P, B * H * W))
    mflat = np.swapaxes(dm.reshape(B, C, H * W), 1, 2).reshape(B * H * W, C)
    out = np.asarray(S @ mflat).reshape(lead + (P, C))

    def backward(g):
        gb = g.reshape(B * P, C)
        gm = gp = None
        if _needs(fmap):
            gflat = np.asarray(S.T @ gb).reshape(B, H * W, C)
            gm = np.swapaxes(gflat, 1, 2).reshape(dm.shape)
        if _needs(points):
            v00, v01 = mflat[i00.reshape(-1)], mflat[i01.reshape(-1)]
            v10, v11 = mflat[i10.reshape(-1)], mflat[i11.reshape(-1)]
            wyf, wxf = wy.reshape(-1, 1), wx.reshape(-1, 1)
            dvx = (1 - wyf) * (v01 - v00) + wyf * (v11 - v10)
            dvy = (1 - wxf) * (v10 - v00) + wxf * (v11 - v01)
            gx = (dvx * gb).sum(-1).reshape(B, P)
            gy = (dvy * gb).sum(-1).reshape(B, P)
            gx = gx * ((pts[..., 0] > 0) & (pts[..., 0] < W - 1))
            gy = gy * ((pts[..., 1] > 0) & (pts[..., 1] < H - 1))
            gp = np.stack([gx, gy], axis=-1).reshape(dp.shape)
        return gm, gp

    return _emit(out, (fmap, points), backward)


def where(mask, a, b) -> Tensor:
    m = np.asarray(mask, dtype=bool)
    da, db = _operands(a, b)
    out = np.where(m, da, db)

    def backward(g):
        return unbroadcast(np.where(m, g, 0.0), da.shape), unbroadcast(np.where(m, 0.0, g), db.shape)

    return _emit(out, (a, b), backward)


__all__ = [
    "Tensor", "as_tensor", "unbroadcast", "add", "sub", "mul", "div", "neg", "power", "exp", "log",
    "sqrt", "sin", "cos", "tanh", "sigmoid", "abs", "maximum", "clip", "gelu", "sum", "mean", "reshape",
    "transpose", "swapaxes", "getitem", "concat", "stack", "matmul", "layer_norm", "softmax",
    "conv_transpose2d", "bilinear_sample", "where",
]
