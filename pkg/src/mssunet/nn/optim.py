"""Adam and the plateau learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """In-place bias-corrected Adam update of every parameter with a gradient."""
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
    return state


@dataclass
class PlateauSchedule:
    """Drop the rate by ``factor`` after ``patience`` epochs without a new best
    loss; stop after ``stop_patience`` such epochs.

    The drop counter resets on improvement and after each drop; the stop
    counter resets only on improvement.
    """

    lr: float = 3e-4
    factor: float = 0.2
    patience: int = 30
    stop_patience: int = 50
    best: float = math.inf
    since_drop: int = 0
    since_best: int = 0

    def step(self, epoch_loss: float) -> tuple[float, bool]:
        if epoch_loss < self.best:
            self.best = float(epoch_loss)
            self.since_drop = 0
            self.since_best = 0
        else:
            self.since_drop += 1
            self.since_best += 1
            if self.since_drop >= self.patience:
                self.lr *= self.factor
                self.since_drop = 0
        return self.lr, self.since_best >= self.stop_patience


def lr_schedule(state: PlateauSchedule, epoch_loss: float) -> tuple[float, bool]:
    return state.step(epoch_loss)
