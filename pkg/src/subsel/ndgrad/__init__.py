"""Minimal float64 autodiff, optimizers and gradient checking."""

from .check import analytic_grads, grad_check, numeric_grads
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import ADAPTIVE, PLAIN, OptimizerState, optimizer_step
from .tensor import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    current_tape,
    exp,
    gather,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    spmm,
    sub,
    sum,
)

__all__ = [
    "ADAPTIVE",
    "PLAIN",
    "OptimizerState",
    "Tape",
    "Tensor",
    "add",
    "analytic_grads",
    "as_tensor",
    "backward",
    "concat",
    "current_tape",
    "exp",
    "gather",
    "grad_check",
    "load_checkpoint",
    "log",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "numeric_grads",
    "optimizer_step",
    "relu",
    "reshape",
    "save_checkpoint",
    "scale",
    "sigmoid",
    "softmax",
    "spmm",
    "sub",
    "sum",
]
