"""Dense tensors with reverse-mode differentiation."""

from autodiff.tensor import ShapeError, Tape, TapeError, Tensor, backward
