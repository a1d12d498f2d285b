"""Minimal N×C×H×W tensor engine: reverse-mode autodiff, the image ops
needed by the reconstruction network, Adam, and finite-difference checks."""

from .adam import Adam
from .functional import (
    BatchNormStats,
    batchnorm2d,
    channel_slice,
    concat,
    conv2d,
    mosaic_mask,
    mse_loss,
    pixel_shuffle,
    pixel_unshuffle,
    relu,
)
from .tensor import (
    DEFAULT_DTYPE,
    AutodiffError,
    Tensor,
    add,
    mul,
    mul_const,
    set_finite_checks,
    tensor_sum,
)

__all__ = [
    "Adam",
    "AutodiffError",
    "BatchNormStats",
    "DEFAULT_DTYPE",
    "Tensor",
    "add",
    "batchnorm2d",
    "channel_slice",
    "concat",
    "conv2d",
    "mosaic_mask",
    "mse_loss",
    "mul",
    "mul_const",
    "pixel_shuffle",
    "pixel_unshuffle",
    "relu",
    "set_finite_checks",
    "tensor_sum",
]
