"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .layers import Parameter


class OptimError(RuntimeError):
    pass


@dataclass
class ScheduleConfig:
    """Cosine decay from per-group base rates down to ``min_lr`` over ``total_steps``."""

    base_lr: dict = field(default_factory=lambda: {"main": 8e-4, "block": 8e-5})
    min_lr: float = 0.0
    total_steps: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.min_lr < 0:
            raise ValueError("min_lr must be >= 0")


def cosine_lr(step: int, cfg: ScheduleConfig, group: str = "main") -> float:
    """Learning rate at ``step``: min + (base-min) * (1 + cos(pi*step/total)) / 2."""
    if group not in cfg.base_lr:
        raise KeyError(f"no base lr for group {group!r}")
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    base = cfg.base_lr[group]
    return cfg.min_lr + 0.5 * (base - cfg.min_lr) * (1.0 + np.cos(np.pi * step / cfg.total_steps))


class AdamW:
    """Adam with decoupled weight decay.

    Per step, for every trainable parameter with a gradient:
        m <- b1*m + (1-b1)*g          v <- b2*v + (1-b2)*g^2
        p <- p - lr*wd*p - lr*mhat/(sqrt(vhat) + eps)
    with the usual bias corrections on m and v.  Learning rates are supplied
    per parameter group at each call, so any schedule can drive it.
    """

    def __init__(self, params: Sequence[Parameter], betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.05):
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ValueError(f"betas must lie in [0, 1), got {betas}")
        self.params = list(params)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.array.grad = None

    def step(self, lrs: Mapping[str, float]) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for i, p in enumerate(self.params):
            if p.frozen:
                continue
            g = p.array.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise OptimError(f"non-finite gradient for parameter {p.name or i}")
            if p.group not in lrs:
                raise OptimError(f"no learning rate for group {p.group!r} (parameter {p.name})")
            lr = lrs[p.group]
            self._m[i] = b1 * self._m[i] + (1.0 - b1) * g
            self._v[i] = b2 * self._v[i] + (1.0 - b2) * g * g
            m_hat = self._m[i] / c1
            v_hat = self._v[i] / c2
            p.array.data = (
                p.data - lr * self.weight_decay * p.data - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            )
