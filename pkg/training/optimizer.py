from typing import List, Sequence, Tuple

import numpy as np

from autodiff.tensor import Tensor


class Adam:
    """Adam with bias correction; parameters without a gradient are left untouched"""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params: List[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.first = [np.zeros_like(p.values) for p in self.params]
        self.second = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * p.grad
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * p.grad * p.grad
            update = (self.first[i] / correction1) / (np.sqrt(self.second[i] / correction2) + self.eps)
            p.values = p.values - self.lr * update

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients so their joint L2 norm is at most ``max_norm``; returns the norm before clipping"""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if norm > max_norm > 0:
        scale = max_norm / (norm + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm
