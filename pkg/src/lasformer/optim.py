"""Adam with linear warmup and global-norm clipping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class OptimConfig:
    lr: float = 3e-4
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    clip: float = 1.0
    batch_size: int = 16


class Adam:
    def __init__(self, params: dict[str, Tensor], config: OptimConfig):
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def learning_rate(self) -> float:
        c = self.config
        return c.lr * min(1.0, (self.t + 1) / max(c.warmup, 1))

    def step(self, params: dict[str, Tensor]) -> float:
        """Apply one update from the ``.grad`` fields; returns the pre-clip grad norm."""
        c = self.config
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
        scale = c.clip / norm if c.clip and norm > c.clip else 1.0
        lr = self.learning_rate()
        self.t += 1
        bc1 = 1.0 - c.beta1**self.t
        bc2 = 1.0 - c.beta2**self.t
        for name, g in grads.items():
            if scale != 1.0:
                g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            params[name].data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return norm
