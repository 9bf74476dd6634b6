"""Minimal reverse-mode automatic differentiation over dense numpy arrays."""

from . import ops
from .gradcheck import EvaluationError, analytic_grads, grad_check
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    active_tape,
    get_dtype,
    no_grad,
    precision,
    set_precision,
)

__all__ = [
    "EvaluationError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "analytic_grads",
    "as_tensor",
    "get_dtype",
    "grad_check",
    "no_grad",
    "ops",
    "precision",
    "set_precision",
]
