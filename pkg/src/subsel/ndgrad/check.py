from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def analytic_grads(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = f()
    backward(tape, loss)
    return [p.grad.copy() for p in params]


def numeric_grads(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences over every coordinate of every parameter."""
    out = []
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        out.append(g)
    return out


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|).

    ``f`` reads the current values of ``params`` and returns a scalar tensor.
    """
    ana = analytic_grads(f, params)
    num = numeric_grads(f, params, h)
    worst = 0.0
    for a, n in zip(ana, num):
        if a.size:
            err = np.abs(a - n) / np.maximum(1.0, np.abs(n))
            worst = max(worst, float(err.max()))
    return worst
