"""Tensor storage, layer primitives, and reverse-mode differentiation."""

from .functional import (
    BatchNormState,
    batch_norm,
    binary_cross_entropy,
    concat_channels,
    conv2d,
    max_pool2d,
    relu,
    sigmoid,
    soft_dice,
    sum_squares,
    upsample_bilinear,
)
from .tensor import GradTape, Tensor, as_tensor, backward, log, total_sum

__all__ = [
    "BatchNormState",
    "GradTape",
    "Tensor",
    "as_tensor",
    "backward",
    "batch_norm",
    "binary_cross_entropy",
    "concat_channels",
    "conv2d",
    "log",
    "max_pool2d",
    "relu",
    "sigmoid",
    "soft_dice",
    "sum_squares",
    "total_sum",
    "upsample_bilinear",
]
