"""Differentiable operations on :class:`~tcnet.tensor.core.Tensor`.

Binary elementwise ops follow right-aligned broadcasting where each axis must
either match or have extent 1.  Anything else raises ``ValueError`` naming the
operation and both shapes.
"""
from __future__ import annotations

import builtins
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(kind: str, a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    out = []
    for i in range(1, builtins.max(len(a), len(b)) + 1):
        x = a[-i] if i <= len(a) else 1
        y = b[-i] if i <= len(b) else 1
        if x != y and x != 1 and y != 1:
            raise ValueError(f"{kind}: incompatible shapes {a} and {b}")
        out.append(builtins.max(x, y))
    return tuple(reversed(out))


def _binary(kind, a, b, fwd, da, db):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(kind, a.shape, b.shape)
    out = fwd(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(da(g, a.data, b.data, out), a.shape) if a.requires_grad else None
        gb = _unbroadcast(db(g, a.data, b.data, out), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), vjp, kind)


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda g, x, y, o: g, lambda g, x, y, o: g)


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda g, x, y, o: g, lambda g, x, y, o: -g)


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply, lambda g, x, y, o: g * y, lambda g, x, y, o: g * x)


def div(a, b) -> Tensor:
    return _binary(
        "div", a, b, np.divide,
        lambda g, x, y, o: g / y,
        lambda g, x, y, o: -g * o / y,
    )


def atan2(y, x) -> Tensor:
    """Elementwise angle of (x, y); the gradient is taken as 0 at the origin."""
    def fwd(a, b):
        return np.arctan2(a, b)

    def _r2(a, b):
        r2 = a * a + b * b
        return np.where(r2 > 0, r2, 1.0), r2 > 0

    def dy(g, a, b, o):
        r2, nz = _r2(a, b)
        return np.where(nz, g * b / r2, 0.0)

    def dx(g, a, b, o):
        r2, nz = _r2(a, b)
        return np.where(nz, -g * a / r2, 0.0)

    return _binary("atan2", y, x, fwd, dy, dx)


def hypot(re, im) -> Tensor:
    """sqrt(re² + im²) with a zero gradient where the modulus vanishes."""
    def dre(g, a, b, o):
        return np.where(o > 0, g * a / np.where(o > 0, o, 1.0), 0.0)

    def dim(g, a, b, o):
        return np.where(o > 0, g * b / np.where(o > 0, o, 1.0), 0.0)

    return _binary("hypot", re, im, np.hypot, dre, dim)


def _unary(kind, x, fwd, deriv):
    x = as_tensor(x)
    out = fwd(x.data)
    return make_node(out, (x,), lambda g: (g * deriv(x.data, out),), kind)


def neg(x) -> Tensor:
    return _unary("neg", x, np.negative, lambda v, o: -1.0)


def exp(x) -> Tensor:
    return _unary("exp", x, np.exp, lambda v, o: o)


def log(x) -> Tensor:
    return _unary("log", x, np.log, lambda v, o: 1.0 / v)


def log1p(x) -> Tensor:
    return _unary("log1p", x, np.log1p, lambda v, o: 1.0 / (1.0 + v))


def sqrt(x) -> Tensor:
    return _unary("sqrt", x, np.sqrt, lambda v, o: 0.5 / o)


def tanh(x) -> Tensor:
    return _unary("tanh", x, np.tanh, lambda v, o: 1.0 - o * o)


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x) -> Tensor:
    return _unary("sigmoid", x, _sigmoid_np, lambda v, o: o * (1.0 - o))


def softplus(x) -> Tensor:
    return _unary(
        "softplus", x,
        lambda v: np.logaddexp(0.0, v),
        lambda v, o: _sigmoid_np(v),
    )


def sin(x) -> Tensor:
    return _unary("sin", x, np.sin, lambda v, o: np.cos(v))


def cos(x) -> Tensor:
    return _unary("cos", x, np.cos, lambda v, o: -np.sin(v))


def abs(x) -> Tensor:
    return _unary("abs", x, np.abs, lambda v, o: np.sign(v))


def power(x, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise TypeError("power: exponent must be a Python number")
    p = float(p)
    return _unary("power", x, lambda v: np.power(v, p), lambda v, o: p * np.power(v, p - 1.0))


def where(cond, a, b) -> Tensor:
    """Select ``a`` where the constant mask ``cond`` holds, else ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("where", _broadcast_shape("where", cond.shape, a.shape), b.shape)
    out = np.where(cond, a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(np.broadcast_to(out, shape).copy(), (a, b), vjp, "where")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands need rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), vjp, "matmul")


def pad(x, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    x = as_tensor(x)
    if left < 0 or right < 0:
        raise ValueError(f"pad: widths must be nonnegative, got ({left}, {right})")
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    out = np.pad(x.data, widths)
    n = x.shape[-1]
    return make_node(out, (x,), lambda g: (g[..., left:left + n],), "pad")


def conv1d(x, w, stride: int = 1, padding: int = 0, depthwise: bool = False) -> Tensor:
    """Sliding dot product (cross-correlation) along the last axis.

    Cross-channel: ``x`` is (..., C_in, L), ``w`` is (C_out, C_in, k) and the
    result is (..., C_out, L_out).  Depthwise (per-channel): ``w`` is (C, k)
    and each channel is filtered by its own kernel.
    """
    x, w = as_tensor(x), as_tensor(w)
    if stride < 1:
        raise ValueError(f"conv1d: stride must be >= 1, got {stride}")
    if padding:
        x = pad(x, padding, padding)
    if x.ndim < 2:
        raise ValueError(f"conv1d: input needs shape (..., C, L), got {x.shape}")
    c_in, length = x.shape[-2], x.shape[-1]
    if depthwise:
        if w.ndim != 2 or w.shape[0] != c_in:
            raise ValueError(f"conv1d: depthwise kernel shape {w.shape} does not fit input {x.shape}")
    elif w.ndim != 3 or w.shape[1] != c_in:
        raise ValueError(f"conv1d: kernel shape {w.shape} does not fit input {x.shape}")
    k = w.shape[-1]
    if k > length:
        raise ValueError(f"conv1d: kernel length {k} exceeds signal length {length} (shapes {w.shape}, {x.shape})")
    lead = x.shape[:-2]
    xf = x.data.reshape((-1, c_in, length))
    win = sliding_window_view(xf, k, axis=-1)[:, :, ::stride, :]
    l_out = win.shape[2]
    if depthwise:
        out = np.einsum("bclk,ck->bcl", win, w.data, optimize=True)
    else:
        out = np.einsum("bclk,ock->bol", win, w.data, optimize=True)
    out_shape = lead + out.shape[1:]

    def vjp(g):
        gf = g.reshape((-1,) + out.shape[1:])
        gx = gw = None
        if w.requires_grad:
            if depthwise:
                gw = np.einsum("bcl,bclk->ck", gf, win, optimize=True)
            else:
                gw = np.einsum("bol,bclk->ock", gf, win, optimize=True)
        if x.requires_grad:
            if depthwise:
                gwin = gf[..., None] * w.data[None, :, None, :]
            else:
                gwin = np.einsum("bol,ock->bclk", gf, w.data, optimize=True)
            gxf = np.zeros_like(xf)
            span = stride * (l_out - 1) + 1
            for j in range(k):
                gxf[:, :, j:j + span:stride] += gwin[:, :, :, j]
            gx = gxf.reshape(x.shape)
        return gx, gw

    return make_node(out.reshape(out_shape), (x, w), vjp, "conv1d")


# -- shape manipulation ------------------------------------------------------

def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    if isinstance(index, Tensor):
        index = index.data.astype(np.intp)
    out = x.data[index]
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def vjp(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return make_node(np.array(out, copy=True), (x,), vjp, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: empty input list")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ValueError(f"concat: shapes {ts[0].shape} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return [
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if t.requires_grad else None
            for i, t in enumerate(ts)
        ]

    return make_node(out, ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ValueError(f"stack: shapes differ: {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def vjp(g):
        return [np.take(g, i, axis=ax) if t.requires_grad else None for i, t in enumerate(ts)]

    return make_node(out, ts, vjp, "stack")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, tuple(axes))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    _broadcast_shape("broadcast_to", x.shape, shape)
    out = np.broadcast_to(x.data, shape).copy()
    return make_node(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def flip(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return make_node(np.flip(x.data, axis).copy(), (x,), lambda g: (np.flip(g, axis),), "flip")


# -- reductions --------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return make_node(np.asarray(out), (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims).copy(),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // builtins.max(np.asarray(out).size, 1)
    return make_node(
        np.asarray(out), (x,),
        lambda g: (_expand_reduced(g, x.shape, axis, keepdims) / count,),
        "mean",
    )


def max(x, axis=None, keepdims: bool = False) -> Tensor:
    """Exact maximum; the gradient goes to the first maximal element."""
    x = as_tensor(x)
    out = np.max(x.data, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            mask = np.zeros(x.size)
            mask[np.argmax(x.data)] = 1.0
            return (mask.reshape(x.shape) * np.reshape(g, ()),)
        idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, gk, axis=axis)
        return (gx,)

    return make_node(np.asarray(out), (x,), vjp, "max")


def min(x, axis=None, keepdims: bool = False) -> Tensor:
    return neg(max(neg(x), axis=axis, keepdims=keepdims))


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(x.data - m), axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        return (gk * np.exp(x.data - s),)

    return make_node(out, (x,), vjp, "logsumexp")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = np.exp(x.data - np.max(x.data, axis=axis, keepdims=True))
    out = z / np.sum(z, axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_node(out, (x,), vjp, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


# -- generic dispatch --------------------------------------------------------

_KINDS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "exp": exp, "log": log, "log1p": log1p, "sqrt": sqrt, "tanh": tanh, "sigmoid": sigmoid,
    "softplus": softplus, "sin": sin, "cos": cos, "abs": abs, "power": power, "atan2": atan2,
    "hypot": hypot, "where": where, "matmul": matmul, "conv1d": conv1d, "pad": pad,
    "getitem": getitem, "concat": None, "stack": None, "reshape": reshape,
    "transpose": transpose, "broadcast_to": broadcast_to, "flip": flip,
    "sum": sum, "mean": mean, "max": max, "min": min, "logsumexp": logsumexp,
    "softmax": softmax, "log_softmax": log_softmax,
}


def tensor_op(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Apply the operation named ``kind`` to ``inputs`` with keyword ``attrs``."""
    if kind not in _KINDS:
        raise ValueError(f"tensor_op: unknown operation kind {kind!r}")
    attrs = dict(attrs or {})
    if kind == "concat":
        return concat(inputs, **attrs)
    if kind == "stack":
        return stack(inputs, **attrs)
    return _KINDS[kind](*inputs, **attrs)


OP_KINDS = tuple(sorted(_KINDS))
