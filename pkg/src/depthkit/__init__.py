"""Self-supervised depth estimation kit built on a small tape autodiff core."""

from .tensor import (
    ComputationTape,
    NumericsError,
    ShapeError,
    Tape,
    Tensor,
    TensorError,
)

__all__ = [
    "ComputationTape",
    "NumericsError",
    "ShapeError",
    "Tape",
    "Tensor",
    "TensorError",
]
