"""Minimal n-dimensional tensors with reverse-mode differentiation."""

from .layers import (
    bce,
    conv2d,
    dense,
    encoder_block,
    layer_norm,
    lstm_cell,
    lstm_sequence,
    maxpool2,
    mse,
    multihead_attention,
    positional_encoding,
    upsample2,
)
from .tensor import (
    Tensor,
    backward,
    concat,
    exp,
    log,
    matmul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softmax,
    tanh,
    topo_order,
    transpose,
)

__all__ = [
    "Tensor", "backward", "bce", "concat", "conv2d", "dense", "encoder_block", "exp", "layer_norm", "log",
    "lstm_cell", "lstm_sequence", "matmul", "maxpool2", "mse", "multihead_attention", "no_grad",
    "positional_encoding", "relu", "reshape", "sigmoid", "softmax", "tanh", "topo_order", "transpose", "upsample2",
]
