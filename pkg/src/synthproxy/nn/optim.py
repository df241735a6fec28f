"""Adam and the two-phase cosine learning-rate schedule."""

from __future__ import annotations

import math

import numpy as np

from synthproxy.nn.tensor import Tensor


class Adam:
    """Standard Adam with bias correction; betas (0.9, 0.999), eps 1e-8."""

    def __init__(self, params: list[Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, m, v in zip(self.params, self._m, self._v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def cosine_restart_lr(
    epoch: int,
    total_epochs: int = 30,
    base_lr: float = 1e-3,
    min_lr: float = 2e-6,
    restart_epoch: int = 10,
) -> float:
    """Cosine decay from base_lr, warm-restarted once.

    Epoch 0 and the restart epoch sit at base_lr; the final epoch sits at
    exactly min_lr.  A restart outside (0, total) degenerates to one phase.
    """
    if not 0 <= epoch < total_epochs:
        raise ValueError("epoch outside the schedule")
    if 0 < restart_epoch < total_epochs:
        if epoch < restart_epoch:
            t = epoch / restart_epoch
        else:
            span = total_epochs - 1 - restart_epoch
            t = (epoch - restart_epoch) / span if span > 0 else 1.0
    else:
        span = total_epochs - 1
        t = epoch / span if span > 0 else 1.0
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t))
