"""Central finite-difference checks for first- and second-order gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .grad import grad
from .tensor import Tape, Tensor


def numerical_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    view = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        view[i] = (hi - lo) / (2 * eps)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(1, max|a|, max|n|)."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    scale = max(1.0, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    return float(np.abs(analytic - numeric).max() / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Worst relative error between reverse-mode and finite-difference gradients.

    ``fn`` maps tensors to a tensor; its sum is differentiated.
    """
    inputs = [np.array(a, dtype=np.float64) for a in inputs]

    def scalar(arrays):
        return float(fn(*[Tensor(a) for a in arrays]).data.sum())

    tape = Tape()
    leaves = [tape.watch(a) for a in inputs]
    out = fn(*leaves)
    grads = grad(out.sum() if out.size != 1 else out, leaves)
    worst = 0.0
    for i, g in enumerate(grads):
        def f(a, i=i):
            arrays = list(inputs)
            arrays[i] = a
            return scalar(arrays)
        worst = max(worst, relative_error(g.data, numerical_gradient(f, inputs[i], eps)))
    return worst


def gradgradcheck(fn: Callable[..., Tensor], x: np.ndarray, params: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Check d/dparams ||d fn(x, *params) / dx||^2 against finite differences.

    The finite-difference side only ever runs first-order backward passes, so
    it is independent of the graph-of-graph path being checked.
    """
    x = np.array(x, dtype=np.float64)
    params = [np.array(p, dtype=np.float64) for p in params]

    def grad_norm(param_arrays) -> float:
        tape = Tape()
        xt = tape.watch(x)
        out = fn(xt, *[Tensor(p) for p in param_arrays])
        (gx,) = grad(out.sum(), [xt])
        return float(np.sum(gx.data ** 2))

    tape = Tape()
    xt = tape.watch(x)
    leaves = [tape.watch(p) for p in params]
    out = fn(xt, *leaves)
    (gx,) = grad(out.sum(), [xt], create_graph=True)
    norm = (gx * gx).sum()
    analytic = grad(norm, leaves)
    worst = 0.0
    for i, g in enumerate(analytic):
        def f(a, i=i):
            arrays = list(params)
            arrays[i] = a
            return grad_norm(arrays)
        worst = max(worst, relative_error(g.data, numerical_gradient(f, params[i], eps)))
    return worst
