"""Differentiable primitives over :class:`Tensor`.

Each function computes a numpy forward value and registers a vector-Jacobian
product on the active tape. Broadcasting follows numpy; gradients are summed
back to the operand shape.
"""
from __future__ import annotations

import numpy as np
from scipy import special

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, record

_SQRT_2PI = np.sqrt(2.0 * np.pi)


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _bshape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("add", a, b)
    sa, sb = a.shape, b.shape
    return record("add", a.value + b.value, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("sub", a, b)
    sa, sb = a.shape, b.shape
    return record("sub", a.value - b.value, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("mul", a, b)
    av, bv = a.value, b.value
    return record("mul", av * bv, (a, b),
                  lambda g: (unbroadcast(g * bv, av.shape), unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _bshape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return record("div", out, (a, b),
                  lambda g: (unbroadcast(g / bv, av.shape),
                             unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.value, (a,), lambda g: (-g,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return record("power", av ** p, (a,), lambda g: (g * p * av ** (p - 1),))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return record("sqrt", out, (a,), lambda g: (0.5 * g / out,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.value)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return record("log", np.log(av), (a,), lambda g: (g / av,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    s = np.sign(a.value)
    return record("abs", np.abs(a.value), (a,), lambda g: (g * s,))


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    av = a.value
    keep = (av >= lo) & (av <= hi)
    return record("clip", np.clip(av, lo, hi), (a,), lambda g: (g * keep,))


def where(cond, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape
    return record("where", np.where(cond, a.value, b.value), (a, b),
                  lambda g: (unbroadcast(np.where(cond, g, 0.0), sa),
                             unbroadcast(np.where(cond, 0.0, g), sb)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return unbroadcast(ga, av.shape), unbroadcast(gb, bv.shape)

    return record("matmul", av @ bv, (a, b), vjp)


# ---------------------------------------------------------------- activations

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0
    return record("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = special.expit(a.value)
    return record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return record("softplus", np.logaddexp(0.0, av), (a,),
                  lambda g: (g * special.expit(av),))


def gelu(a) -> Tensor:
    """Exact GeLU, x * Phi(x) with the Gaussian CDF."""
    a = as_tensor(a)
    av = a.value
    cdf = special.ndtr(av)
    pdf = np.exp(-0.5 * av * av) / _SQRT_2PI
    return record("gelu", av * cdf, (a,), lambda g: (g * (cdf + av * pdf),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.value)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = special.softmax(a.value, axis=axis)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = special.log_softmax(a.value, axis=axis)

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (a,), vjp)


# ---------------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record("sum", np.sum(a.value, axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def _extreme(a, axis, keepdims, pick, name):
    a = as_tensor(a)
    av = a.value
    idx = pick(av, axis=axis)
    idx_k = np.expand_dims(idx, axis)
    out = np.take_along_axis(av, idx_k, axis=axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        full = np.zeros_like(av)
        np.put_along_axis(full, idx_k, gk, axis=axis)
        return (full,)

    return record(name, out, (a,), vjp)


def amax(a, axis: int, keepdims: bool = False) -> Tensor:
    """Maximum along one axis; the subgradient goes to the first maximiser."""
    return _extreme(a, axis, keepdims, np.argmax, "amax")


def amin(a, axis: int, keepdims: bool = False) -> Tensor:
    return _extreme(a, axis, keepdims, np.argmin, "amin")


# ---------------------------------------------------------------- structure

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", old, shape) from None
    return record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.value, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError("broadcast_to", old, shape) from None
    return record("broadcast_to", np.array(out), (a,), lambda g: (unbroadcast(g, old),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return record("getitem", np.array(a.value[idx]), (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", out, ts, vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.value for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("stack", *[t.shape for t in ts]) from None

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return record("stack", out, ts, vjp)


# ---------------------------------------------------------------- composites

def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return sqrt(sum(square(a), axis=axis, keepdims=keepdims))


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = mean(square(xc), axis=-1, keepdims=True)
    return xc / sqrt(var + eps) * gain + bias


def l1_distance(a, b, axis: int = -1) -> Tensor:
    """Mean absolute difference along ``axis``."""
    return mean(abs(sub(a, b)), axis=axis)


def cross_entropy(logits, target) -> Tensor:
    """Per-row cross-entropy from raw logits; ``target`` holds class indices.

    Returns a tensor shaped like ``target`` (no reduction).
    """
    logits = as_tensor(logits)
    target = np.asarray(target, dtype=np.int64)
    if logits.shape[:-1] != target.shape:
        raise ShapeError("cross_entropy", logits.shape, target.shape)
    lsm = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=DTYPE)
    np.put_along_axis(onehot, target[..., None], 1.0, axis=-1)
    return -sum(lsm * onehot, axis=-1)


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy on logits (stable form)."""
    logits = as_tensor(logits)
    t = np.asarray(target, dtype=DTYPE)
    _bshape("bce_with_logits", logits, Tensor(t))
    x = logits.value
    out = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    s = special.expit(x)
    return record("bce_with_logits", out, (logits,),
                  lambda g: (unbroadcast(g * (s - t), logits.shape),))


def bce(prob, target, eps: float = 1e-6) -> Tensor:
    """Elementwise binary cross-entropy on probabilities clamped to [eps, 1-eps]."""
    p = clip(prob, eps, 1.0 - eps)
    t = np.asarray(target, dtype=DTYPE)
    return -(log(p) * t + log(1.0 - p) * (1.0 - t))
