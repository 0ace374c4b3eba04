"""Tape-based reverse-mode automatic differentiation with gradients of gradients."""

from . import ops
from .check import gradcheck, gradgradcheck, numerical_gradient, relative_error
from .grad import (
    DisconnectedInputWarning,
    Gradient,
    backward,
    batch_jacobian,
    grad,
    input_gradient,
    jacobian,
)
from .ops import record_op
from .tensor import (
    Node,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    as_tensor,
    is_recording,
    no_record,
    recording,
)

__all__ = [
    "DisconnectedInputWarning", "Gradient", "Node", "ShapeError", "Tape", "TapeError",
    "Tensor", "as_tensor", "backward", "batch_jacobian", "grad", "gradcheck",
    "gradgradcheck", "input_gradient", "is_recording", "jacobian", "no_record",
    "numerical_gradient", "ops", "record_op", "recording", "relative_error",
]
