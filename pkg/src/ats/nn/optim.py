"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import Param


@dataclass
class OptimizerState:
    """Per-parameter moment estimates."""

    m: np.ndarray
    v: np.ndarray


@dataclass
class AdamW:
    params: list
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    state: list = field(default_factory=list)

    def __post_init__(self):
        self.state = [OptimizerState(np.zeros_like(p.value), np.zeros_like(p.value)) for p in self.params]

    def step(self):
        """One update from accumulated grads; grads are cleared afterwards."""
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, s in zip(self.params, self.state):
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient for {p.name or 'param'}")
            s.m = b1 * s.m + (1.0 - b1) * p.grad
            s.v = b2 * s.v + (1.0 - b2) * p.grad * p.grad
            update = (s.m / bc1) / (np.sqrt(s.v / bc2) + self.eps)
            # decoupled decay: shrink weights directly, not through the gradient
            p.value = p.value - self.lr * update - self.lr * self.weight_decay * p.value
        for p in self.params:
            p.zero_grad()


def adamw_step(opt: AdamW) -> None:
    opt.step()
