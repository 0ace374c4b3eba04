"""Differentiable operations.

Every backward rule is expressed through the operations in this module, never
through raw numpy on saved arrays, so that a backward pass run with recording
enabled is itself differentiable.  Quantities that are piecewise constant in the
inputs (ReLU masks, max-pool argmax indices, clamp masks) enter backward rules
as detached constants, which is exactly their derivative almost everywhere.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, record


def _axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None


def unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        lead + i for i, d in enumerate(shape) if d == 1 and g.shape[lead + i] != 1
    )
    return reshape(sum(g, axis=axes), shape)


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("add", a, b)

    def vjp(g, out, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(g, b.shape) if needs[1] else None)

    return record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("sub", a, b)

    def vjp(g, out, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(neg(g), b.shape) if needs[1] else None)

    return record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("mul", a, b)

    def vjp(g, out, needs):
        return (unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    return record("mul", (a, b), a.data * b.data, vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast("div", a, b)

    def vjp(g, out, needs):
        ga = div(g, b)
        gb = unbroadcast(neg(mul(ga, out)), b.shape) if needs[1] else None
        return (unbroadcast(ga, a.shape) if needs[0] else None, gb)

    return record("div", (a, b), a.data / b.data, vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", (a,), -a.data, lambda g, out, needs: (neg(g),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return record("square", (a,), a.data * a.data,
                  lambda g, out, needs: (mul(g, mul(a, 2.0)),))


def sqrt(a) -> Tensor:
    """Square root; the derivative at 0 is infinite, callers guard zeros."""
    a = as_tensor(a)
    return record("sqrt", (a,), np.sqrt(a.data),
                  lambda g, out, needs: (div(g, mul(out, 2.0)),))


def power(a, exponent: float) -> Tensor:
    if exponent == 2:
        return square(a)
    if exponent == 0.5:
        return sqrt(a)
    a = as_tensor(a)
    p = float(exponent)
    return record("pow", (a,), a.data ** p,
                  lambda g, out, needs: (mul(g, mul(power(a, p - 1.0), p)),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    return record("exp", (a,), np.exp(a.data), lambda g, out, needs: (mul(g, out),))


def log(a) -> Tensor:
    a = as_tensor(a)
    return record("log", (a,), np.log(a.data), lambda g, out, needs: (div(g, a),))


def relu(a) -> Tensor:
    """max(z, 0) with derivative 0 at z == 0."""
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return record("relu", (a,), a.data * mask,
                  lambda g, out, needs: (mul(g, Tensor(mask)),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g, out, needs):
        return (mul(g, mul(out, sub(1.0, out))),)

    return record("sigmoid", (a,), expit(a.data), vjp)


def clamp_min(a, lower: float) -> Tensor:
    """max(a, lower); entries at or below ``lower`` get zero derivative."""
    a = as_tensor(a)
    mask = (a.data > lower).astype(np.float64)
    return record("clamp", (a,), np.maximum(a.data, lower),
                  lambda g, out, needs: (mul(g, Tensor(mask)),))


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def vjp(g, out, needs):
        return (matmul(g, transpose(b)) if needs[0] else None,
                matmul(transpose(a), g) if needs[1] else None)

    return record("matmul", (a, b), a.data @ b.data, vjp)


# reductions and shape -------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    kept = tuple(1 if i in axes else d for i, d in enumerate(a.shape))

    def vjp(g, out, needs):
        gk = g if keepdims else reshape(g, kept)
        return (broadcast_to(gk, a.shape),)

    return record("sum", (a,), a.data.sum(axis=axes, keepdims=keepdims), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return record("reshape", (a,), data, lambda g, out, needs: (reshape(g, a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record("transpose", (a,), np.transpose(a.data, axes),
                  lambda g, out, needs: (transpose(g, inverse),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return record("broadcast", (a,), data,
                  lambda g, out, needs: (unbroadcast(g, a.shape),))


# gather / scatter -----------------------------------------------------------

def _gather(a: Tensor, idx: np.ndarray, op: str) -> Tensor:
    """out[j] = a.flat[idx[j]], or 0 where idx[j] == -1."""
    idx = np.asarray(idx, dtype=np.intp)
    if idx.size and (idx.max() >= a.size or idx.min() < -1):
        raise ShapeError(f"{op}: index out of range for shape {a.shape}")
    flat = a.data.reshape(-1)
    if idx.size and idx.min() < 0:
        data = np.where(idx >= 0, flat[np.maximum(idx, 0)], 0.0)
    else:
        data = flat[idx]
    shape = a.shape
    return record(op, (a,), data, lambda g, out, needs: (scatter(g, idx, shape),))


def take(a, idx) -> Tensor:
    """Gather from the flattened tensor; ``-1`` entries produce zeros."""
    return _gather(as_tensor(a), idx, "index_select")


def scatter(g, idx, shape) -> Tensor:
    """Adjoint of :func:`take`: add ``g`` into a zero tensor of ``shape``."""
    g = as_tensor(g)
    idx = np.asarray(idx, dtype=np.intp)
    if g.shape != idx.shape:
        raise ShapeError(f"scatter: values {g.shape} do not match indices {idx.shape}")
    size = int(np.prod(shape))
    valid = idx >= 0
    data = np.bincount(idx[valid], weights=g.data[valid], minlength=size).reshape(shape)
    return record("scatter", (g,), data,
                  lambda gg, out, needs: (_gather(gg, idx, "index_select"),))


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    idx = np.arange(a.size).reshape(a.shape)[key]
    return take(a, idx)


def index_select(a, indices, axis: int = 0) -> Tensor:
    a = as_tensor(a)
    idx = np.take(np.arange(a.size).reshape(a.shape), np.asarray(indices), axis=axis)
    return take(a, idx)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            d != r for i, (d, r) in enumerate(zip(t.shape, ref)) if i != axis
        ):
            raise ShapeError(
                f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}"
            )
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def vjp(g, out, needs):
        parts = []
        for i, need in enumerate(needs):
            if not need:
                parts.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(bounds[i]), int(bounds[i + 1]))
            parts.append(getitem(g, tuple(key)))
        return tuple(parts)

    return record("concat", tuple(tensors), np.concatenate([t.data for t in tensors], axis), vjp)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = []
    for t in tensors:
        ax = axis % (t.ndim + 1)
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


# pooling and convolution ----------------------------------------------------

def maxpool2d_indices(a) -> np.ndarray:
    """Flat indices selected by a 2x2/stride-2 max pool over the last two axes.

    Ties go to the first maximal entry of the window in row-major order.
    Trailing odd rows/columns are dropped.
    """
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    *lead, h, w = data.shape
    ho, wo = h // 2, w // 2
    if ho == 0 or wo == 0:
        raise ShapeError(f"maxpool: spatial size {(h, w)} smaller than the 2x2 window")
    base = np.arange(data.size).reshape(data.shape)[..., : 2 * ho, : 2 * wo]
    vals = data[..., : 2 * ho, : 2 * wo]

    def windows(arr):
        arr = arr.reshape(*lead, ho, 2, wo, 2)
        arr = np.moveaxis(arr, -3, -2)
        return arr.reshape(*lead, ho, wo, 4)

    choice = np.argmax(windows(vals), axis=-1)
    return np.take_along_axis(windows(base), choice[..., None], axis=-1)[..., 0]


def maxpool2d(a) -> Tensor:
    a = as_tensor(a)
    return _gather(a, maxpool2d_indices(a), "maxpool")


@lru_cache(maxsize=64)
def _pool_matrix(h: int, w: int, window: int, stride: int) -> np.ndarray:
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    P = np.zeros((h * w, ho * wo))
    for oy in range(ho):
        for ox in range(wo):
            for dy in range(window):
                row = (oy * stride + dy) * w + ox * stride
                P[row: row + window, oy * wo + ox] = 1.0 / (window * window)
    P.flags.writeable = False
    return P


def avgpool2d(a, window: int, stride: int = 1) -> Tensor:
    """Average pool over the last two axes, no padding."""
    a = as_tensor(a)
    *lead, h, w = a.shape
    if window < 1 or window > min(h, w):
        raise ShapeError(f"avgpool: window {window} invalid for spatial size {(h, w)}")
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    P = _pool_matrix(h, w, window, stride)
    flat = reshape(a, (-1, h * w))
    return reshape(matmul(flat, Tensor(P)), tuple(lead) + (ho, wo))


def global_avg_pool(a) -> Tensor:
    return mean(a, axis=(-2, -1))


@lru_cache(maxsize=64)
def _im2col_index(n, c, h, w, kh, kw, pad) -> np.ndarray:
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    ky, kx = np.meshgrid(np.arange(kh), np.arange(kw), indexing="ij")
    iy = oy.reshape(-1, 1, 1) + ky.reshape(1, 1, -1) - pad
    ix = ox.reshape(-1, 1, 1) + kx.reshape(1, 1, -1) - pad
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    local = np.arange(c).reshape(1, -1, 1) * h * w + iy * w + ix
    local = np.where(valid, local, -1).reshape(ho * wo, c * kh * kw)
    offsets = (np.arange(n) * c * h * w).reshape(-1, 1, 1)
    idx = np.where(local >= 0, local + offsets, -1)
    idx.flags.writeable = False
    return idx


def conv2d(x, weight, bias=None, padding: int = 1) -> Tensor:
    """Stride-1 cross-correlation of (N, C, H, W) input with (O, C, kh, kw) weights."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    n, c, h, w = x.shape
    o, _, kh, kw = weight.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {(h, w)}")
    cols = _gather(x, _im2col_index(n, c, h, w, kh, kw, padding), "im2col")
    cols = reshape(cols, (n * ho * wo, c * kh * kw))
    out = matmul(cols, transpose(reshape(weight, (o, c * kh * kw))))
    if bias is not None:
        out = add(out, bias)
    return transpose(reshape(out, (n, ho, wo, o)), (0, 3, 1, 2))


# softmax --------------------------------------------------------------------

def softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError(f"softmax: temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g, out, needs):
        gs = mul(g, out)
        return (div(sub(gs, mul(out, sum(gs, axis=axis, keepdims=True))), temperature),)

    return record("softmax", (a,), data, vjp)


def log_softmax(a, axis: int = -1, temperature: float = 1.0) -> Tensor:
    a = as_tensor(a)
    if temperature <= 0:
        raise ValueError(f"log_softmax: temperature must be positive, got {temperature}")
    z = a.data / temperature
    z = z - z.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g, out, needs):
        probs = exp(out)
        return (div(sub(g, mul(probs, sum(g, axis=axis, keepdims=True))), temperature),)

    return record("log_softmax", (a,), data, vjp)


OPS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "conv2d": conv2d, "sum": sum, "mean": mean,
    "relu": relu, "sigmoid": sigmoid, "maxpool": maxpool2d, "avgpool": avgpool2d,
    "global_avg_pool": global_avg_pool, "softmax": softmax, "log_softmax": log_softmax,
    "log": log, "exp": exp, "square": square, "sqrt": sqrt, "concat": concat,
    "index_select": index_select, "reshape": reshape, "transpose": transpose,
    "clamp": clamp_min,
}


def record_op(kind: str, inputs, **attrs) -> Tensor:
    """Apply the operation named ``kind`` to ``inputs``.

    >>> record_op("add", [Tensor([1.0, 2.0]), Tensor([3.0, 4.0])]).data
    array([4., 6.])
    """
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    if kind == "concat":
        return fn(list(inputs), **attrs)
    return fn(*inputs, **attrs)
