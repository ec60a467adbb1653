"""Minimal dense-tensor engine: reverse-mode autodiff, SGD, checkpoints."""

from .tensor import (
    DEFAULT_DTYPE,
    Parameter,
    ShapeError,
    Tape,
    TapeEntry,
    Tensor,
    active_tape,
    backward,
)
from .ops import add, concat_channels, conv2d, maxpool2, mul, neg, relu, sub, sum_all
from .optim import sgd_step
from .gradcheck import (
    check_gradients,
    default_eps,
    default_rtol,
    max_scaled_error,
    numeric_gradient,
)
from .checkpoint import (
    CheckpointData,
    CheckpointError,
    FingerprintMismatch,
    load_checkpoint,
    save_checkpoint,
)

__all__ = [
    "DEFAULT_DTYPE",
    "Parameter",
    "ShapeError",
    "Tape",
    "TapeEntry",
    "Tensor",
    "active_tape",
    "backward",
    "add",
    "concat_channels",
    "conv2d",
    "maxpool2",
    "mul",
    "neg",
    "relu",
    "sub",
    "sum_all",
    "sgd_step",
    "check_gradients",
    "default_eps",
    "default_rtol",
    "max_scaled_error",
    "numeric_gradient",
    "CheckpointData",
    "CheckpointError",
    "FingerprintMismatch",
    "load_checkpoint",
    "save_checkpoint",
]
