"""Differentiable ops over :class:`~mstpde.tensor.core.Tensor`.

Every op computes its forward value with NumPy and records a closure that
returns one gradient per input (``None`` for inputs that need none). Ops
accept plain arrays or Python scalars wherever a constant is meaningful.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import DTYPE, ShapeError, Tensor, as_tensor

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "sqrt", "exp", "absolute",
    "sum", "mean", "matmul", "linear", "dot", "reshape", "transpose", "concat",
    "stack", "getitem", "leaky_relu", "softmax", "conv2d", "avg_pool2",
    "upsample2_linear", "forward_op", "OPS",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, "add", (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, "sub", (a, b),
                           lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad * bd, "mul", (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, "div", (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return Tensor._from_op(ad ** p, "power", (a,), lambda g: (g * p * ad ** (p - 1),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        # subgradient 0 at the origin keeps nRMSE(x, x) differentiable
        return (np.divide(g, 2.0 * out, out=np.zeros_like(out), where=out > 0),)

    return Tensor._from_op(out, "sqrt", (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, "exp", (a,), lambda g: (g * out,))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return Tensor._from_op(np.abs(a.data), "abs", (a,), lambda g: (g * sign,))


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return Tensor._from_op(out, "leaky_relu", (a,), lambda g: (np.where(pos, g, slope * g),))


# reductions ----------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(a.data.sum(axis=axes, keepdims=keepdims), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, "softmax", (a,), backward)


# linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(ad @ bd, "matmul", (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` has shape (in, out)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    inputs = (x, w)
    out = x.data @ w.data
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[1],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
        out = out + b.data
        inputs = (x, w, b)
    xd, wd = x.data, w.data

    def backward(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g @ wd.T) if x.requires_grad else None
        gw = xd.reshape(-1, wd.shape[0]).T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._from_op(out, "linear", inputs, backward)


def dot(a, b, axis: int = -1) -> Tensor:
    """Dot product of ``a`` and ``b`` along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError(f"dot: lengths differ along axis {axis}: {a.shape} vs {b.shape}")
    return sum(mul(a, b), axis=axis)


# shape manipulation --------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {shape}") from None
    src = a.shape
    return Tensor._from_op(out, "reshape", (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    inv = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return Tensor._from_op(a.data.transpose(axes), "transpose", (a,),
                           lambda g: (g.transpose(inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} differ off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return Tensor._from_op(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % (ts[0].ndim + 1)
    return concat([reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]) for t in ts], axis=ax)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem: index {index!r} invalid for shape {a.shape}: {exc}") from None
    shape = a.shape
    basic = _is_basic_index(index)

    def backward(g):
        gx = np.zeros(shape, dtype=DTYPE)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(np.array(out, dtype=DTYPE), "getitem", (a,), backward)


# convolutional -------------------------------------------------------------

PADDING_MODES = ("periodic", "zeros")


def _pad(x: np.ndarray, p: int, mode: str) -> np.ndarray:
    width = ((0, 0),) * (x.ndim - 2) + ((p, p), (p, p))
    return np.pad(x, width, mode="wrap" if mode == "periodic" else "constant")


def _im2col(x: np.ndarray, k: int, mode: str) -> np.ndarray:
    """(B, C, H, W) -> contiguous (B*H*W, k*k*C) patches of the padded input."""
    B, C, H, W = x.shape
    xp = np.ascontiguousarray(_pad(x, k // 2, mode).transpose(0, 2, 3, 1))
    cols = np.empty((B, H, W, k, k, C), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j, :] = xp[:, i:i + H, j:j + W, :]
    return cols.reshape(B * H * W, k * k * C)


def _correlate(x: np.ndarray, w: np.ndarray, mode: str, cols=None) -> np.ndarray:
    B, _, H, W = x.shape
    if cols is None:
        cols = _im2col(x, w.shape[2], mode)
    out = cols @ w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1).T
    return out.reshape(B, H, W, w.shape[0]).transpose(0, 3, 1, 2)


def conv2d(x, w, b=None, padding: str = "periodic") -> Tensor:
    """Stride-1 'same' convolution (cross-correlation) of NCHW input.

    ``w`` has shape (C_out, C_in, k, k) with odd ``k``. ``padding`` is
    ``"periodic"`` (circular) or ``"zeros"``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if padding not in PADDING_MODES:
        raise ValueError(f"conv2d: padding must be one of {PADDING_MODES}, got {padding!r}")
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3] \
            or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    p = k // 2
    if padding == "periodic" and (x.shape[2] < p or x.shape[3] < p):
        raise ShapeError(f"conv2d: periodic padding {p} exceeds input {x.shape}")
    cols = _im2col(x.data, k, padding)
    out = _correlate(x.data, w.data, padding, cols)
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"conv2d: bias {b.shape} does not match kernel {w.shape}")
        out = out + b.data[None, :, None, None]
        inputs = (x, w, b)
    wd = w.data

    def backward(g):
        gx = gw = None
        if w.requires_grad:
            g2 = g.transpose(0, 2, 3, 1).reshape(-1, g.shape[1])
            k_ = wd.shape[2]
            gw = (g2.T @ cols).reshape(wd.shape[0], k_, k_, wd.shape[1]).transpose(0, 3, 1, 2)
        if x.requires_grad:
            # adjoint of a stride-1 'same' correlation: correlate with the flipped,
            # channel-swapped kernel under the same padding
            gx = _correlate(g, wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3), padding)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return Tensor._from_op(out, "conv2d", inputs, backward)


def avg_pool2(x) -> Tensor:
    """2x2 average pooling with stride 2 over the last two axes."""
    x = as_tensor(x)
    if x.ndim < 2 or x.shape[-1] % 2 or x.shape[-2] % 2:
        raise ShapeError(f"avg_pool2: last two axes of {x.shape} must be even")
    *lead, H, W = x.shape
    out = x.data.reshape(*lead, H // 2, 2, W // 2, 2).mean(axis=(-3, -1))

    def backward(g):
        g = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1)
        return (g * 0.25,)

    return Tensor._from_op(out, "avg_pool2", (x,), backward)


def _upsample_matrix(n: int, boundary: str = "clamp") -> np.ndarray:
    # align_corners=False: source coordinate (i + 0.5) / 2 - 0.5; at the edges the
    # neighbour is either clamped or taken from the opposite side (periodic)
    if boundary not in ("clamp", "periodic"):
        raise ValueError(f"upsample boundary must be 'clamp' or 'periodic', got {boundary!r}")
    u = np.zeros((2 * n, n), dtype=DTYPE)
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        if boundary == "clamp":
            src = max(src, 0.0)
        i0 = int(np.floor(src))
        lam = src - i0
        if boundary == "clamp":
            i1 = min(i0 + 1, n - 1)
        else:
            i0, i1 = i0 % n, (i0 + 1) % n
        u[i, i0] += 1.0 - lam
        u[i, i1] += lam
    return u


def upsample2_linear(x, boundary: str = "clamp") -> Tensor:
    """Bilinear 2x upsampling of the last two axes (align_corners=False)."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"upsample2_linear: need at least 2 axes, got {x.shape}")
    uh = _upsample_matrix(x.shape[-2], boundary)
    uw = _upsample_matrix(x.shape[-1], boundary)
    out = uh @ x.data @ uw.T
    return Tensor._from_op(out, "upsample2_linear", (x,), lambda g: (uh.T @ g @ uw,))


OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg, "power": power,
    "sqrt": sqrt, "exp": exp, "abs": absolute, "sum": sum, "mean": mean,
    "matmul": matmul, "linear": linear, "dot": dot, "reshape": reshape,
    "transpose": transpose, "concat": concat, "stack": stack, "getitem": getitem,
    "leaky_relu": leaky_relu, "softmax": softmax, "conv2d": conv2d,
    "avg_pool2": avg_pool2, "upsample2_linear": upsample2_linear,
}


def forward_op(kind: str, *inputs, **attrs) -> Tensor:
    """Apply the op registered under ``kind``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **attrs)
