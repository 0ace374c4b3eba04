"""Tensors, tapes and the recording machinery.

A :class:`Tape` is an append-only list of :class:`Node` records.  Node ids are
assigned in creation order, so every input of a node has a smaller id and the
tape is always topologically sorted.  Backward rules are written with the same
differentiable operations as the forward pass; when a backward pass runs with
``create_graph=True`` those operations are appended to the same tape, which is
what makes gradients of gradients possible.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands have shapes the operation cannot combine."""


class TapeError(RuntimeError):
    """Misuse of a tape: mixed tapes, detached wrt tensors, generation overflow."""


_state = threading.local()


def is_recording() -> bool:
    return not getattr(_state, "paused", False)


@contextmanager
def recording(enabled: bool = True):
    """Enable or suspend tape recording for operations run inside the block."""
    previous = getattr(_state, "paused", False)
    _state.paused = not enabled
    try:
        yield
    finally:
        _state.paused = previous


def no_record():
    return recording(False)


class Node:
    __slots__ = ("id", "op", "inputs", "vjp", "generation", "tape", "out")

    def __init__(self, id, op, inputs, vjp, generation, tape):
        self.id = id
        self.op = op
        self.inputs = inputs
        self.vjp = vjp
        self.generation = generation
        self.tape = tape
        self.out = None

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, generation={self.generation})"


class Tape:
    """Append-only record of operations.

    ``generation`` counts backward passes run over the tape.  Nodes remember the
    generation during which they were recorded, so ``generation > 0`` marks
    nodes produced while differentiating (the second-order part of the graph).
    """

    def __init__(self, max_generation: int = 1 << 20):
        self.nodes: list[Node] = []
        self.generation = 0
        self.max_generation = max_generation

    def __len__(self):
        return len(self.nodes)

    def watch(self, value) -> "Tensor":
        """Return a copy of ``value`` registered as a leaf on this tape."""
        data = value.data if isinstance(value, Tensor) else value
        out = Tensor(np.array(data, dtype=np.float64))
        out.node = self._append("leaf", (), None)
        out.node.out = out
        return out

    def _append(self, op, inputs, vjp) -> Node:
        node = Node(len(self.nodes), op, inputs, vjp, self.generation, self)
        self.nodes.append(node)
        return node

    def begin_pass(self) -> int:
        if self.generation >= self.max_generation:
            raise TapeError(
                f"tape generation overflow: {self.generation} passes "
                f"(limit {self.max_generation})"
            )
        self.generation += 1
        return self.generation

    def count_differentiated_nodes(self) -> int:
        """Number of nodes recorded during a ``create_graph`` backward pass."""
        return sum(1 for n in self.nodes if n.generation > 0)

    def dump(self) -> str:
        """Text edge list, one line per node: ``id op gen <- input ids``."""
        lines = []
        for n in self.nodes:
            ins = " ".join(str(p.id) if p is not None else "-" for p in n.inputs)
            shape = "x".join(map(str, n.out.shape)) if n.out is not None else "?"
            lines.append(f"{n.id} {n.op} g{n.generation} [{shape}] <- {ins}".rstrip())
        return "\n".join(lines)


VJP = Callable[["Tensor", "Tensor", tuple], Sequence[Optional["Tensor"]]]


class Tensor:
    """Float64 array with an optional link into a tape.

    Arithmetic on tensors that are not on any tape produces detached tensors;
    nothing is recorded.
    """

    __slots__ = ("data", "node")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, data, node: Optional[Node] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape(self) -> Optional[Tape]:
        return self.node.tape if self.node is not None else None

    @property
    def T(self) -> "Tensor":
        return ops.transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        where = f", node={self.node.id}" if self.node is not None else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{where})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        return ops.matmul(other, self)

    def __pow__(self, exponent):
        return ops.power(self, exponent)

    def __getitem__(self, key):
        return ops.getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def record(op: str, inputs: Sequence[Tensor], data: np.ndarray, vjp: Optional[VJP]) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and append a node if any input is taped."""
    out = Tensor(data)
    if vjp is None or not is_recording():
        return out
    tape = None
    parents = []
    for t in inputs:
        node = t.node
        if node is not None:
            if tape is None:
                tape = node.tape
            elif node.tape is not tape:
                raise TapeError(f"{op}: inputs are recorded on different tapes")
        parents.append(node)
    if tape is None:
        return out
    out.node = tape._append(op, tuple(parents), vjp)
    out.node.out = out
    return out


from . import ops  # noqa: E402  (ops needs Tensor defined above)
