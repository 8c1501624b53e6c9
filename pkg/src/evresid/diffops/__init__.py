"""Minimal differentiable array core used by the flow model."""
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .module import Conv2d, ConvGRU, Module, Parameter
from .nn import (avg_pool2d, bilinear_sample, conv2d, convex_upsample, gather_maps, gru_cell,
                 instance_norm, upsample_bilinear, upsample_matrix)
from .optim import Adam, clip_grad_norm, optimizer_step
from .tensor import (Tensor, abs_, add, as_tensor, concat, div, exp, getitem, is_grad_enabled, matmul,
                     mean, mul, neg, no_grad, relu, reshape, set_debug, sigmoid, split, sqrt, square, stack,
                     sub, sum_, tanh, transpose)

__all__ = [
    "Adam", "CheckpointError", "Conv2d", "ConvGRU", "Module", "Parameter", "Tensor",
    "abs_", "add", "as_tensor", "avg_pool2d", "bilinear_sample", "clip_grad_norm", "concat", "conv2d",
    "convex_upsample", "div", "exp", "gather_maps", "getitem", "grad_check", "gru_cell",
    "instance_norm", "is_grad_enabled", "load_checkpoint", "matmul", "mean", "mul", "neg", "no_grad", "optimizer_step",
    "relu", "reshape", "save_checkpoint", "set_debug", "sigmoid", "split", "sqrt", "square", "stack",
    "sub", "sum_", "tanh", "transpose", "upsample_bilinear", "upsample_matrix",
]
