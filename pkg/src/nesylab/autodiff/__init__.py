"""Reverse-mode automatic differentiation over dense float64 arrays, plus Adam."""

from . import ops
from .adam import AdamState, adam_step
from .core import Tape, Tensor, as_tensor, backward

__all__ = ["AdamState", "Tape", "Tensor", "adam_step", "as_tensor", "backward", "ops"]
