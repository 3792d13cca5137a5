"""Minimal reverse-mode autodiff over dense numpy arrays, plus Adam."""
from .complex import ComplexPair
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError, Tensor, add, as_tensor, clip_max, concat, conv2d, cos, div, exp,
    get_dtype, getitem, grad_enabled, linear, matmul, maxpool2x2, mean, mul, neg,
    no_grad, power, precision, relu, reshape, set_dtype, sin, sqrt, stack, sub,
    sumsq, swap_last, take, tanh, transpose, tsum, where,
)
from .gradcheck import numerical_grad, max_rel_error

__all__ = [
    "Adam", "AdamState", "ComplexPair", "ShapeError", "Tensor", "adam_step", "add",
    "as_tensor", "clip_max", "concat", "conv2d", "cos", "div", "exp", "get_dtype",
    "getitem", "grad_enabled", "linear", "matmul", "max_rel_error", "maxpool2x2",
    "mean", "mul", "neg", "no_grad", "numerical_grad", "power", "precision", "relu",
    "reshape", "set_dtype", "sin", "sqrt", "stack", "sub", "sumsq", "swap_last",
    "take", "tanh", "transpose", "tsum", "where",
]
