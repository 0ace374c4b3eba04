"""Reverse-mode differentiation over a tape."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, TapeError, recording


class DisconnectedInputWarning(UserWarning):
    """The differentiated-against tensor does not influence the output."""


@dataclass(frozen=True)
class Gradient:
    wrt: int
    value: Tensor


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to each tensor in ``wrt``.

    Tensors that are not ancestors of ``output`` get zero gradients.  With
    ``create_graph`` the returned gradients are recorded on the tape and can be
    differentiated again.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ShapeError(
            f"backward: output must be a scalar, got shape {output.shape}; reduce it first"
        )
    results: list = [None] * len(wrt)
    root = output.node
    if root is not None:
        tape = root.tape
        tape.begin_pass()
        targets: dict[int, list[int]] = {}
        for pos, t in enumerate(wrt):
            if t.node is not None and t.node.tape is tape and t.node.id <= root.id:
                targets.setdefault(t.node.id, []).append(pos)
        if targets:
            _sweep(tape, output, targets, results, create_graph)
    return [
        r if r is not None else Tensor(np.zeros(t.shape))
        for r, t in zip(results, wrt)
    ]


def _sweep(tape, output, targets, results, create_graph):
    root = output.node
    lo = min(targets)
    span = tape.nodes[lo: root.id + 1]
    relevant = np.zeros(root.id + 1 - lo, dtype=bool)
    for node in span:
        if node.id in targets:
            relevant[node.id - lo] = True
            continue
        for p in node.inputs:
            if p is not None and p.id >= lo and relevant[p.id - lo]:
                relevant[node.id - lo] = True
                break
    if not relevant[root.id - lo]:
        return
    pending = {root.id: Tensor(np.ones(output.shape))}
    with recording(create_graph):
        for node in reversed(span):
            g = pending.pop(node.id, None)
            if g is None:
                continue
            for pos in targets.get(node.id, ()):
                results[pos] = g
            if node.vjp is None:
                continue
            needs = tuple(
                p is not None and p.id >= lo and bool(relevant[p.id - lo])
                for p in node.inputs
            )
            if not any(needs):
                continue
            parts = node.vjp(g, node.out, needs)
            for p, need, gp in zip(node.inputs, needs, parts):
                if not need or gp is None:
                    continue
                prev = pending.get(p.id)
                pending[p.id] = gp if prev is None else ops.add(prev, gp)


def backward(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> dict[int, Gradient]:
    """Like :func:`grad` but keyed by the tape node id of each ``wrt`` tensor."""
    wrt = list(wrt)
    for t in wrt:
        if t.node is None:
            raise TapeError("backward: wrt tensor is not recorded on a tape")
    values = grad(output, wrt, create_graph=create_graph)
    return {t.node.id: Gradient(t.node.id, v) for t, v in zip(wrt, values)}


def jacobian(output: Tensor, input: Tensor, create_graph: bool = False) -> Tensor:
    """Dense Jacobian of shape ``(output.size, input.size)``, one reverse pass per row."""
    flat = ops.reshape(output, (-1,))
    k = flat.size
    if output.node is None or input.node is None or not _is_ancestor(input, output):
        warnings.warn(
            "jacobian: input is not an ancestor of output; returning zeros",
            DisconnectedInputWarning,
            stacklevel=2,
        )
        return Tensor(np.zeros((k, input.size)))
    rows = []
    for i in range(k):
        (row,) = grad(flat[i], [input], create_graph=create_graph)
        rows.append(ops.reshape(row, (-1,)))
    return ops.stack(rows, axis=0)


def input_gradient(outputs: Tensor, inputs: Tensor, weights, create_graph: bool = False) -> Tensor:
    """Per-sample gradient of ``sum_i weights[n, i] * outputs[n, i]`` w.r.t. ``inputs[n]``.

    Valid when samples in the batch do not interact, which holds for every
    network in this package.  ``weights`` is a constant array of the same shape
    as ``outputs``.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != outputs.shape:
        raise ShapeError(
            f"input_gradient: weights {weights.shape} do not match outputs {outputs.shape}"
        )
    total = ops.sum(ops.mul(outputs, Tensor(weights)))
    (g,) = grad(total, [inputs], create_graph=create_graph)
    return g


def batch_jacobian(outputs: Tensor, inputs: Tensor, rows=None, create_graph: bool = False) -> list[Tensor]:
    """List of per-sample gradients ``d outputs[:, i] / d inputs`` for each row ``i``."""
    n, k = outputs.shape
    rows = range(k) if rows is None else rows
    result = []
    for i in rows:
        w = np.zeros((n, k))
        w[:, i] = 1.0
        result.append(input_gradient(outputs, inputs, w, create_graph=create_graph))
    return result


def _is_ancestor(a: Tensor, b: Tensor) -> bool:
    if a.node.tape is not b.node.tape or a.node.id > b.node.id:
        return False
    target = a.node.id
    seen = set()
    stack = [b.node]
    while stack:
        node = stack.pop()
        if node.id == target:
            return True
        for p in node.inputs:
            if p is not None and p.id >= target and p.id not in seen:
                seen.add(p.id)
                stack.append(p)
    return False
