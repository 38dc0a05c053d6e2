"""Minimal float64 tensor engine with reverse-mode differentiation."""
from .autograd import (
    Tensor,
    absolute,
    add,
    as_tensor,
    flatten,
    is_grad_enabled,
    linear,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    reshape,
    sigmoid,
    slice_time,
    stack,
    sub,
    sum,
    take_last,
    tanh,
)
from .checkpoint import dump_checkpoint, load_checkpoint
from .gradcheck import grad_check
from .kernels import avg_pool2d, conv1d_temporal, conv2d_spatial, lstm_layer
from .optim import AdamState, adam_step, mae, mse_loss

__all__ = [
    "AdamState",
    "Tensor",
    "absolute",
    "adam_step",
    "add",
    "as_tensor",
    "avg_pool2d",
    "conv1d_temporal",
    "conv2d_spatial",
    "dump_checkpoint",
    "flatten",
    "grad_check",
    "is_grad_enabled",
    "linear",
    "load_checkpoint",
    "lstm_layer",
    "mae",
    "matmul",
    "mean",
    "mse_loss",
    "mul",
    "neg",
    "no_grad",
    "reshape",
    "sigmoid",
    "slice_time",
    "stack",
    "sub",
    "sum",
    "take_last",
    "tanh",
]
