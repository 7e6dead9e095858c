"""Float64 arrays with reverse-mode autodiff, just enough for the forecaster."""

from .gradcheck import check_parameters, finite_difference_check
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    detach,
    div,
    exp,
    getitem,
    is_grad_enabled,
    layer_norm,
    log,
    masked_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    softmax,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
    xlogx,
)

__all__ = [
    "NonFiniteError", "ShapeError", "Tensor", "add", "as_tensor", "check_parameters",
    "concat", "detach", "div", "exp", "finite_difference_check", "getitem",
    "is_grad_enabled", "layer_norm", "log", "masked_softmax", "matmul", "mean", "mul",
    "neg", "no_grad", "power", "relu", "reshape", "sigmoid", "softmax", "stack", "sub",
    "swapaxes", "tanh", "transpose", "tsum", "xlogx",
]
