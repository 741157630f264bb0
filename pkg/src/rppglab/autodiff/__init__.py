"""Minimal float64 tensor engine with tape-based reverse-mode differentiation."""

from . import ops
from .ops import record
from .optim import Adam, AdamState, adam_step, cosine_anneal, kaiming_init
from .tensor import DiffTensor, Tape, TensorError, backward

__all__ = [
    "Adam", "AdamState", "DiffTensor", "Tape", "TensorError", "adam_step",
    "backward", "cosine_anneal", "kaiming_init", "ops", "record",
]
