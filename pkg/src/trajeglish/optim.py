"""AdamW with decoupled weight decay and a warmup/linear-decay schedule."""

from __future__ import annotations

import numpy as np

from .autodiff import Parameter


class AdamW:
    def __init__(self, params: dict[str, Parameter], lr: float = 5e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = dict(sorted(params.items()))  # fixed update order
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            mhat = self.m[k] / b1c
            vhat = self.v[k] / b2c
            p.data -= self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def warmup_linear_decay(step: int, top_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup to top_lr over warmup_steps, then linear decay to 0."""
    if total_steps <= warmup_steps:
        raise ValueError("total_steps must exceed warmup_steps")
    if step < warmup_steps:
        return top_lr * (step + 1) / warmup_steps
    frac = (step - warmup_steps) / max(total_steps - warmup_steps, 1)
    return top_lr * max(1.0 - frac, 0.0)
