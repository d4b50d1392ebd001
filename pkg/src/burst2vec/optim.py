"""Adam optimizer over named parameter tensors."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Adam:
    """Standard Adam with bias correction.

    Moments and the step counter are kept per parameter, so a parameter that
    sits out a batch (its grad is None) is left bit-for-bit untouched: no
    momentum coasting, no bias-correction drift. That is what makes
    task-cycled training leave the inactive heads alone.

    lr_scales maps parameter names to per-parameter learning-rate multipliers
    (two-timescale training); unnamed parameters use the base rate.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-5,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_scales: dict[str, float] | None = None):
        self.params = dict(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.lr_scales = dict(lr_scales) if lr_scales else {}
        unknown = set(self.lr_scales) - set(self.params)
        if unknown:
            raise ValueError(f"lr_scales for unknown parameters: {sorted(unknown)}")
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = {k: 0 for k in self.params}

    def step(self):
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {name} shape {p.data.shape}")
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            lr = self.lr * self.lr_scales.get(name, 1.0)
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype, copy=False)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None
