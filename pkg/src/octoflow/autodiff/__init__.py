"""Minimal reverse-mode differentiation over dense arrays and octree node features."""

from .octree_ops import interpolate_op, octree_conv, octree_conv_strided, octree_conv_transposed
from .ops import (
    add,
    avg_pool1d,
    concat,
    conv1d,
    fully_connected,
    global_mean_pool,
    inner,
    lrelu,
    mae_loss,
    operator_product,
    repeat_rows,
    reshape,
    scale,
    sparse_matmul,
)
from .gradcheck import check_gradients
from .optim import Adam, AdamState, adam_step
from .tensor import Tape, Tensor, backward, parameter

__all__ = [
    "Adam", "AdamState", "Tape", "Tensor", "adam_step", "add", "avg_pool1d", "backward",
    "check_gradients", "concat", "conv1d", "fully_connected", "global_mean_pool", "inner", "interpolate_op", "lrelu",
    "mae_loss", "octree_conv", "octree_conv_strided", "octree_conv_transposed",
    "operator_product", "parameter", "repeat_rows", "reshape", "scale", "sparse_matmul",
]
