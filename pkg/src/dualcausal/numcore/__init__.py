"""Minimal float64 tensor engine with reverse-mode differentiation."""

from .gradcheck import grad_check, numeric_grad
from .nn import MLP, Linear, Module, Parameter
from .optim import AdamW
from .tensor import (
    Tensor,
    add,
    clamp,
    concat,
    concat_many,
    cross_entropy,
    exp,
    kl_divergence,
    kl_from_logits,
    log,
    log_softmax_rows,
    logsumexp_rows,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    softmax_rows,
    square,
    sub,
    take,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "AdamW", "Linear", "MLP", "Module", "Parameter", "Tensor", "add", "clamp", "concat",
    "concat_many", "cross_entropy", "exp", "grad_check", "kl_divergence", "kl_from_logits",
    "log", "log_softmax_rows", "logsumexp_rows", "matmul", "mean", "mul", "no_grad",
    "numeric_grad", "relu", "reshape", "softmax_rows", "square", "sub", "take", "tanh",
    "transpose", "tsum",
]
