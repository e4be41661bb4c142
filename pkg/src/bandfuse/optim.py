"""Optimizers and learning-rate schedules used by both training stages."""

from __future__ import annotations

import math

import numpy as np

from .errors import UsageError
from .params import ParamStore


class ConstantSchedule:
    def __init__(self, lr: float):
        self.lr0 = lr

    def lr(self, step: int) -> float:
        return self.lr0


class CosineSchedule:
    """Cosine decay; hits lr0 at step 0 and lr_min at step ``total`` exactly."""

    def __init__(self, lr0: float, lr_min: float, total_steps: int):
        if total_steps <= 0:
            raise UsageError("cosine schedule needs total_steps > 0")
        self.lr0 = lr0
        self.lr_min = lr_min
        self.total = total_steps

    def lr(self, step: int) -> float:
        if step <= 0:
            return self.lr0
        if step >= self.total:
            return self.lr_min
        return self.lr_min + 0.5 * (self.lr0 - self.lr_min) * (
            1.0 + math.cos(math.pi * step / self.total)
        )


class SGDMomentum:
    """SGD with classical momentum: v <- m*v + g; w <- w - lr*v."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}
        self.step_count = 0

    def step(self, store: ParamStore, lr: float) -> None:
        for name, p in store.trainable_items():
            if p.grad is None:
                raise UsageError(f"optimizer step before backward: no gradient for {name!r}")
            v = self._velocity.get(name)
            if v is None:
                v = np.zeros_like(p.data)
            v = self.momentum * v + p.grad
            self._velocity[name] = v
            p.data = p.data - lr * v
        self.step_count += 1


class Adam:
    """Adam with bias-corrected first/second moments."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self._t: dict[str, int] = {}
        self.step_count = 0

    def step(self, store: ParamStore, lr: float) -> None:
        for name, p in store.trainable_items():
            if p.grad is None:
                raise UsageError(f"optimizer step before backward: no gradient for {name!r}")
            m = self._m.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
                t = 0
            else:
                v = self._v[name]
                t = self._t[name]
            t += 1
            m = self.beta1 * m + (1.0 - self.beta1) * p.grad
            v = self.beta2 * v + (1.0 - self.beta2) * p.grad * p.grad
            mhat = m / (1.0 - self.beta1**t)
            vhat = v / (1.0 - self.beta2**t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)
            self._m[name], self._v[name], self._t[name] = m, v, t
        self.step_count += 1


def make_optimizer(kind: str, momentum: float = 0.9):
    if kind == "sgd_momentum":
        return SGDMomentum(momentum=momentum)
    if kind == "adam":
        return Adam()
    raise UsageError(f"unknown optimizer kind {kind!r}")


def make_schedule(kind: str, lr0: float, lr_min: float, total_steps: int):
    if kind == "constant":
        return ConstantSchedule(lr0)
    if kind == "cosine":
        return CosineSchedule(lr0, lr_min, total_steps)
    raise UsageError(f"unknown schedule kind {kind!r}")
