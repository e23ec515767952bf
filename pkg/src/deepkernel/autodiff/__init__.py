"""Reverse-mode differentiation over numpy arrays."""

from .functional import (
    BatchNormState,
    DegenerateBatchError,
    batchnorm2d,
    box_sum,
    channel_softmax,
    concat_channels,
    conv2d,
    maxpool2x2,
    mse_loss,
    shift,
    sparse_matvec,
    upsample_bilinear2x,
)
from .tensor import (
    ShapeError,
    Tensor,
    UsageError,
    backward,
    clip,
    concat,
    exp,
    log,
    matmul,
    no_grad,
    relu,
    reshape,
    roll,
    sigmoid,
    stack,
    transpose,
)

__all__ = [
    "BatchNormState",
    "DegenerateBatchError",
    "ShapeError",
    "Tensor",
    "UsageError",
    "backward",
    "batchnorm2d",
    "box_sum",
    "channel_softmax",
    "clip",
    "concat",
    "concat_channels",
    "conv2d",
    "exp",
    "log",
    "matmul",
    "maxpool2x2",
    "mse_loss",
    "no_grad",
    "relu",
    "reshape",
    "roll",
    "shift",
    "sigmoid",
    "sparse_matvec",
    "stack",
    "transpose",
    "upsample_bilinear2x",
]
