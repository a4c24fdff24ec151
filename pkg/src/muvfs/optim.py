"""Optimizers and learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor


def _as_arrays(values):
    return [v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
            for v in values]


class SgdMomentum:
    """SGD with classical momentum: v <- mu*v + g; p <- p - lr*v."""

    kind = "sgd-momentum"

    def __init__(self, params, momentum: float = 0.9):
        self.params = list(params)
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p.data if isinstance(p, Tensor) else p)
                         for p in self.params]
        self.step_count = 0

    def step(self, grads, lr: float):
        if lr <= 0:
            raise ValueError(f"sgd-momentum: lr must be positive, got {lr}")
        grads = _as_arrays(grads)
        if len(grads) != len(self.params):
            raise ShapeError(f"sgd-momentum: {len(grads)} grads for {len(self.params)} params")
        for p, v, g in zip(self.params, self.velocity, grads):
            data = p.data if isinstance(p, Tensor) else p
            if g.shape != data.shape:
                raise ShapeError(f"sgd-momentum: grad shape {g.shape} != param shape {data.shape}")
            v *= self.momentum
            v += g
            data -= lr * v
        self.step_count += 1


class Adam:
    """Adam with bias-corrected first/second moments."""

    kind = "adam"

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.m = [np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in self.params]
        self.v = [np.zeros_like(p.data if isinstance(p, Tensor) else p) for p in self.params]
        self.step_count = 0

    def step(self, grads, lr: float):
        if lr <= 0:
            raise ValueError(f"adam: lr must be positive, got {lr}")
        grads = _as_arrays(grads)
        if len(grads) != len(self.params):
            raise ShapeError(f"adam: {len(grads)} grads for {len(self.params)} params")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            data = p.data if isinstance(p, Tensor) else p
            if g.shape != data.shape:
                raise ShapeError(f"adam: grad shape {g.shape} != param shape {data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class LrSchedule:
    """Step-indexed learning rate with an optional linear warmup segment.

    kinds: "warmup-cosine" (linear ramp to peak, then half-period cosine to
    final), "cosine-annealing" (cosine only) and "constant".
    """

    kind: str
    peak_lr: float
    final_lr: float = 0.0
    total_steps: int = 1
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("warmup-cosine", "cosine-annealing", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")
        if self.final_lr < 0:
            raise ValueError("final_lr must be non-negative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be at least 1")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps outside [0, total_steps]")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0 or step >= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps})")
    if schedule.kind == "constant":
        return schedule.peak_lr
    w = schedule.warmup_steps if schedule.kind == "warmup-cosine" else 0
    if step < w:
        return schedule.peak_lr * (step + 1) / w
    span = schedule.total_steps - 1 - w
    progress = 1.0 if span <= 0 else (step - w) / span
    return schedule.final_lr + (schedule.peak_lr - schedule.final_lr) * 0.5 * (
        1.0 + math.cos(math.pi * progress)
    )


def warmup_cosine_from_epochs(peak_lr: float, final_lr: float, epochs: int,
                              steps_per_epoch: int, warmup_epochs: int) -> LrSchedule:
    total = max(1, epochs * steps_per_epoch)
    return LrSchedule("warmup-cosine", peak_lr, final_lr, total,
                      min(total, warmup_epochs * steps_per_epoch))
