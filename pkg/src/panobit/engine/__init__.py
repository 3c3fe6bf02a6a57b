"""Minimal tensor engine: numpy storage, tape autodiff, Adam, conv kernels."""

from .adam import AdamState, adam_update
from .kernels import HAVE_NATIVE
from .ops import (
    add,
    avg_pool2x2,
    concat_channels,
    conv2d,
    cross_entropy_logits,
    gelu,
    layer_norm,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    slice_channels,
    softmax,
    sub,
    upsample2x,
)
from .tensor import ShapeError, Tape, Tensor, default_dtype, set_default_dtype

__all__ = [
    "AdamState",
    "HAVE_NATIVE",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_update",
    "add",
    "avg_pool2x2",
    "concat_channels",
    "conv2d",
    "cross_entropy_logits",
    "default_dtype",
    "gelu",
    "layer_norm",
    "matmul",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "set_default_dtype",
    "slice_channels",
    "softmax",
    "sub",
    "upsample2x",
]
