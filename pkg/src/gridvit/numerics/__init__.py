from .autodiff import Tape, Var, as_tensor, default_dtype, precision, value_of
from .gradcheck import grad_check
from .ops import (
    add,
    broadcast_to,
    concat,
    cross_entropy,
    gelu,
    layer_norm,
    linear,
    matmul,
    mul,
    reshape,
    scale,
    softmax,
    take,
    total,
    transpose,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "Tape",
    "Var",
    "adam_step",
    "add",
    "as_tensor",
    "broadcast_to",
    "concat",
    "cross_entropy",
    "default_dtype",
    "gelu",
    "grad_check",
    "layer_norm",
    "linear",
    "matmul",
    "mul",
    "precision",
    "reshape",
    "scale",
    "softmax",
    "take",
    "total",
    "transpose",
    "value_of",
]
