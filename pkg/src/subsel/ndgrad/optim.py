from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import NumericError, ShapeError
from .tensor import Tensor

PLAIN = "plain"
ADAPTIVE = "adaptive"


@dataclass
class OptimizerState:
    """Plain gradient descent or Adam, one instance per parameter group."""

    lr: float
    mode: str = ADAPTIVE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in (PLAIN, ADAPTIVE):
            raise ValueError(f"unknown optimizer mode {self.mode!r}")


def optimizer_step(state: OptimizerState, params: Sequence[Tensor], grads: Sequence[np.ndarray] | None = None):
    """Update ``params`` in place and return them.

    ``grads`` defaults to each parameter's accumulated ``.grad``.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {p.name or '?'}")

    state.step += 1
    if state.mode == PLAIN:
        for p, g in zip(params, grads):
            p.value -= state.lr * g
        return params

    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.value -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
