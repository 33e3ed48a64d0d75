"""ADADELTA with per-tensor accumulators."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdadeltaState:
    rho: float = 0.95
    eps: float = 1e-6
    lr: float = 1.0
    sq_grad: dict = field(default_factory=dict)    # E[g^2]
    sq_update: dict = field(default_factory=dict)  # E[dx^2]
    steps: int = 0

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.eps < 0:
            raise ValueError("eps must be nonnegative")


def adadelta_step(state: AdadeltaState, params: dict, grads: dict) -> dict:
    """Update ``params`` in place and return them.

    E[g^2] <- rho E[g^2] + (1-rho) g^2;  dx = -RMS[dx]/RMS[g] * g;
    E[dx^2] <- rho E[dx^2] + (1-rho) dx^2;  x <- x + lr * dx, with RMS[v] = sqrt(v + eps).
    """
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k}; step rejected")
    rho, eps = state.rho, state.eps
    for k, g in grads.items():
        x = params[k]
        eg = state.sq_grad.setdefault(k, np.zeros_like(x))
        ed = state.sq_update.setdefault(k, np.zeros_like(x))
        eg *= rho
        eg += (1.0 - rho) * g * g
        dx = -np.sqrt(ed + eps) / np.sqrt(eg + eps) * g
        ed *= rho
        ed += (1.0 - rho) * dx * dx
        x += state.lr * dx
    state.steps += 1
    return params


class Adadelta:
    def __init__(self, rho: float = 0.95, eps: float = 1e-6, lr: float = 1.0):
        self.state = AdadeltaState(rho, eps, lr)

    def step(self, params: dict, grads: dict) -> dict:
        return adadelta_step(self.state, params, grads)
