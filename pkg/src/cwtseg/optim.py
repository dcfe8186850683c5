"""Stochastic gradient descent with momentum, weight decay, and learning
rate schedules.

The update per parameter p with gradient g is:

    g' = g + weight_decay * p
    v  = momentum * v + g'
    p  = p - lr * v

Velocity buffers start at zero and persist across steps. A step consumes
the accumulated gradients and resets them to None.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor

__all__ = ["SgdOptimizer", "ScheduleSpec", "schedule_lr"]


@dataclass
class ScheduleSpec:
    """Learning rate schedule.

    kind "constant" ignores step; kind "cosine" anneals from base_lr to 0
    over total_steps following base_lr * 0.5 * (1 + cos(pi * step / total_steps)).
    """

    kind: str = "constant"
    base_lr: float = 0.1
    total_steps: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.kind == "cosine" and self.total_steps < 1:
            raise ValueError(
                f"cosine schedule requires total_steps >= 1, got {self.total_steps}")


def schedule_lr(spec: ScheduleSpec, step: int) -> float:
    """Learning rate at a given 0-based step."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if spec.kind == "constant":
        return spec.base_lr
    if step > spec.total_steps:
        raise ValueError(
            f"step {step} exceeds cosine schedule total_steps {spec.total_steps}")
    return spec.base_lr * 0.5 * (1.0 + math.cos(math.pi * step / spec.total_steps))


class SgdOptimizer:
    """Momentum SGD over an explicit parameter list.

    Parameters must require gradients and not be frozen. Velocities are
    keyed by position, so the parameter list must stay fixed.
    """

    def __init__(self, params: Sequence[Tensor], lr: float,
                 momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        if not self.params:
            raise ValueError("optimizer requires at least one parameter")
        for i, p in enumerate(self.params):
            if not isinstance(p, Tensor):
                raise TypeError(f"parameter {i} is not a Tensor")
            if not p.requires_grad:
                raise ValueError(f"parameter {i} does not require gradients")
        if lr < 0:
            raise ValueError(f"lr must be non-negative, got {lr}")
        if momentum < 0:
            raise ValueError(f"momentum must be non-negative, got {momentum}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocities: list[np.ndarray] = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        """Apply one update using accumulated gradients, then clear them.

        ``lr`` overrides the stored learning rate for this step only.
        """
        eta = self.lr if lr is None else float(lr)
        for i, p in enumerate(self.params):
            if p.frozen:
                raise ValueError(f"parameter {i} is frozen and cannot be updated")
            if p.grad is None:
                raise ValueError(f"parameter {i} has no gradient; run backward first")
        for i, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay != 0.0:
                g = g + self.weight_decay * p.data
            v = self.velocities[i]
            if self.momentum != 0.0:
                v *= self.momentum
                v += g
            else:
                v[...] = g
            p.data -= eta * v
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
