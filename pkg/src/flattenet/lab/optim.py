"""Adam and SGD with step-drop or poly learning-rate schedules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Schedule:
    kind: str = "constant"  # constant | step | poly
    milestones: tuple[int, ...] = ()
    gamma: float = 0.1
    power: float = 0.9
    total: int = 1

    def factor(self, t: int) -> float:
        if self.kind == "constant":
            return 1.0
        if self.kind == "step":
            return self.gamma ** sum(t >= m for m in self.milestones)
        if self.kind == "poly":
            return (1.0 - min(t, self.total) / self.total) ** self.power
        raise ValueError(f"unknown schedule {self.kind!r}")


def poly_lr(base_lr, t, total, power=0.9):
    return base_lr * (1.0 - t / total) ** power


class Optimizer:
    def __init__(self, params, lr, schedule: Schedule | None = None):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.params = list(params)
        self.base_lr = lr
        self.schedule = schedule or Schedule()
        self.t = 0

    @property
    def lr(self) -> float:
        return self.base_lr * self.schedule.factor(self.t)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self):
        lr = self.lr
        for i, p in enumerate(self.params):
            self._update(i, p, lr)
        self.t += 1

    def state(self) -> dict[str, np.ndarray]:
        return {}


class Adam(Optimizer):
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0, schedule=None):
        super().__init__(params, lr, schedule)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def _update(self, i, p, lr):
        g = p.grad + self.weight_decay * p.value if self.weight_decay else p.grad
        self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
        self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
        t = self.t + 1
        mhat = self.m[i] / (1 - self.b1 ** t)
        vhat = self.v[i] / (1 - self.b2 ** t)
        p.value -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self):
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"{p.name}.adam_m"] = m
            out[f"{p.name}.adam_v"] = v
        return out


class SGD(Optimizer):
    def __init__(self, params, lr=1e-2, momentum=0.0, weight_decay=0.0, schedule=None):
        super().__init__(params, lr, schedule)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros_like(p.value) for p in self.params]

    def _update(self, i, p, lr):
        g = p.grad + self.weight_decay * p.value if self.weight_decay else p.grad
        if self.momentum:
            self.buf[i] = self.momentum * self.buf[i] + g
            g = self.buf[i]
        p.value -= lr * g


def make_optimizer(kind, params, lr, schedule=None, **kw):
    if kind == "adam":
        return Adam(params, lr=lr, schedule=schedule, **kw)
    if kind == "sgd":
        return SGD(params, lr=lr, schedule=schedule, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")
