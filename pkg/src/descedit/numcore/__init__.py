"""Small dense-tensor library with reverse-mode differentiation."""

from . import kernels
from .gradcheck import GradCheckReport, NondeterministicError, finite_diff_check
from .ops import (
    add, broadcast_shape, div, elementwise, embedding, exp, layer_norm, log, matmul, mean,
    mse, mul, neg, reshape, silu, softmax, sqrt, sub, sum, transpose,
)
from .params import ParamSet
from .tensor import DomainError, ShapeError, Tensor, backward, is_grad_enabled, no_grad

__all__ = [
    "Tensor", "ParamSet", "ShapeError", "DomainError", "NondeterministicError",
    "GradCheckReport", "backward", "no_grad", "is_grad_enabled", "finite_diff_check",
    "add", "sub", "mul", "div", "neg", "exp", "log", "sqrt", "silu", "elementwise",
    "matmul", "reshape", "transpose", "sum", "mean", "softmax", "layer_norm",
    "embedding", "mse", "broadcast_shape", "kernels",
]
