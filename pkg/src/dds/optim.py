"""Adam optimizer and EMA target-network updates."""

from __future__ import annotations

import numpy as np


class Adam:
    """Bias-corrected Adam over a named parameter group.

    Gradients are read, never cleared; call zero_grad() explicitly between
    steps.  Stepping with any missing gradient is an error.
    """

    def __init__(self, named_params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        names = [name for name, _ in self.params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in optimizer group")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for name, p in self.params:
            if p.grad is None:
                raise RuntimeError(f"adam step with uninitialized gradient: {name}")
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = np.zeros_like(p.data)


def ema_update(target_named, online_named, alpha):
    """Blend target <- (1 - alpha) * target + alpha * online, matched by name."""
    target = list(target_named)
    online = list(online_named)
    t_names = [n for n, _ in target]
    o_names = [n for n, _ in online]
    if t_names != o_names:
        raise ValueError(f"parameter name mismatch: {t_names} vs {o_names}")
    for (_, tp), (_, op) in zip(target, online):
        tp.data *= 1.0 - alpha
        tp.data += alpha * op.data
