"""Minimal reverse-mode tensor core."""
from . import ops
from .gradcheck import gradcheck, numeric_grad, relative_error
from .tensor import ContractError, DimensionError, Tape, Tensor, as_tensor, backward, no_tape

__all__ = [
    "ContractError",
    "DimensionError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "gradcheck",
    "no_tape",
    "numeric_grad",
    "ops",
    "relative_error",
]
