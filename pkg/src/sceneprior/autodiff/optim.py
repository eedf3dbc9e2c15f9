from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


class Optimizer:
    """``lr_scale`` optionally gives each parameter its own multiple of ``lr``."""

    def __init__(self, params: Sequence[Tensor], lr: float, lr_scale: Sequence[float] | None = None):
        self.params = list(params)
        self.lr = lr
        self.lr_scale = [1.0] * len(self.params) if lr_scale is None else [float(x) for x in lr_scale]
        if len(self.lr_scale) != len(self.params):
            raise ValueError("lr_scale needs one entry per parameter")
        self.steps = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        raise NotImplementedError


class Adam(Optimizer):
    """Adaptive-moment optimizer with bias correction."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, lr_scale=None):
        super().__init__(params, lr, lr_scale)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.steps += 1
        c1 = 1.0 - self.beta1 ** self.steps
        c2 = 1.0 - self.beta2 ** self.steps
        for p, m, v, k in zip(self.params, self.m, self.v, self.lr_scale):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.value -= (self.lr * k) * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        out = {"adam.steps": np.array(float(self.steps))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out

    def load_state_arrays(self, state):
        self.steps = int(state["adam.steps"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"adam.m.{i}"]
            self.v[i][...] = state[f"adam.v.{i}"]


class RMSprop(Optimizer):
    """Root-mean-square propagation: v <- a*v + (1-a)*g^2, p <- p - lr*g/(sqrt(v)+eps)."""

    def __init__(self, params, lr=1e-2, alpha=0.99, eps=1e-8, lr_scale=None):
        super().__init__(params, lr, lr_scale)
        self.alpha = alpha
        self.eps = eps
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.steps += 1
        for p, v, k in zip(self.params, self.v, self.lr_scale):
            g = p.grad
            v *= self.alpha
            v += (1.0 - self.alpha) * g * g
            p.value -= (self.lr * k) * g / (np.sqrt(v) + self.eps)

    def state_arrays(self):
        out = {"rmsprop.steps": np.array(float(self.steps))}
        for i, v in enumerate(self.v):
            out[f"rmsprop.v.{i}"] = v
        return out

    def load_state_arrays(self, state):
        self.steps = int(state["rmsprop.steps"])
        for i in range(len(self.params)):
            self.v[i][...] = state[f"rmsprop.v.{i}"]


def step_decay(base_lr: float, epoch: int, decay_epoch: int | None, factor: float = 0.1) -> float:
    """Learning rate after a single multiplicative drop at ``decay_epoch`` (0-based)."""
    if decay_epoch is not None and epoch >= decay_epoch:
        return base_lr * factor
    return base_lr
