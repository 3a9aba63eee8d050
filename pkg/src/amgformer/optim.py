"""Adam with bias correction, plus global-norm gradient clipping."""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ParameterError
from .tape import Param


def clip_global_norm(params, max_norm: float) -> float:
    """Scales gradients in place; returns the pre-clip global norm."""
    if max_norm <= 0:
        raise ParameterError(f"max_norm must be > 0, got {max_norm}")
    sq = 0.0
    for p in params:
        g = p.grad
        sq += float(np.vdot(g, g).real)
    norm = float(np.sqrt(sq))
    if not np.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm > max_norm:
        factor = max_norm / norm
        for p in params:
            p.grad = p.grad * factor
    return norm


class Adam:
    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ParameterError(f"lr must be > 0, got {lr}")
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Param):
                raise ParameterError(f"Adam needs Param leaves, got {type(p)}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {p.name or f'param {i}'}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            mhat = self.m[i] / bc1
            vhat = self.v[i] / bc2
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()
