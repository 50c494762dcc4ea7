"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from .ops import (
    absolute,
    add,
    batch_norm,
    conv2d,
    dropout,
    flatten,
    fully_connected,
    global_reduce,
    l2_loss,
    matmul,
    maxpool2,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    square,
    sub,
)
from .tensor import ParamSet, Tape, Tensor, as_tensor, backward, record, recording
from .gradcheck import numeric_grad, max_rel_error

__all__ = [
    "Tensor", "Tape", "ParamSet", "as_tensor", "backward", "record", "recording",
    "add", "sub", "mul", "square", "matmul", "mean", "reshape", "flatten", "relu", "absolute", "softmax",
    "conv2d", "maxpool2", "batch_norm", "fully_connected", "dropout", "global_reduce",
    "softmax_cross_entropy", "l2_loss", "numeric_grad", "max_rel_error",
]
