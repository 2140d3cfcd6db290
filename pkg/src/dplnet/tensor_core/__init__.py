"""Minimal numpy tensor engine with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import finite_diff_grad, relative_error
from .nn import Conv2d, LayerNorm, Linear, Module, trunc_normal
from .ops import (
    EmptyTargetWarning,
    LabelRangeError,
    activation,
    add,
    bilinear_resize,
    concat,
    conv2d,
    cross_entropy,
    flip,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    transpose,
)
from .optim import OPTIMIZERS, OptState, optimizer_step, poly_lr
from .tensor import (
    VJP,
    ContractError,
    DimensionError,
    Parameter,
    Tape,
    Tensor,
    active_tape,
    backward,
    scope,
    set_debug,
)

__all__ = [
    "ops", "finite_diff_grad", "relative_error", "Conv2d", "LayerNorm", "Linear", "Module",
    "trunc_normal", "EmptyTargetWarning", "LabelRangeError", "activation", "add",
    "bilinear_resize", "concat", "conv2d", "cross_entropy", "flip", "gelu", "layer_norm",
    "linear", "matmul", "mean", "mul", "relu", "reshape", "softmax", "transpose",
    "OPTIMIZERS", "OptState", "optimizer_step", "poly_lr", "VJP", "ContractError",
    "DimensionError", "Parameter", "Tape", "Tensor", "active_tape", "backward", "scope",
    "set_debug",
]
