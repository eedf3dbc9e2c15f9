from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward, new_tape, no_grad


def tape_gradient(f: Callable[[Tensor], Tensor], x: Tensor) -> np.ndarray:
    x.requires_grad = True
    x.grad = np.zeros_like(x.value)
    with new_tape() as tape:
        out = f(x)
        backward(out, tape)
    return x.grad.copy()


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences, one coordinate at a time."""
    g = np.zeros_like(x.value)
    flat = x.value.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(f(x).value)
            flat[i] = orig - eps
            lo = float(f(x).value)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def gradient_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5) -> float:
    """Largest relative error between tape and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor and must be deterministic.
    """
    analytic = tape_gradient(f, x)
    numeric = numeric_gradient(f, x, eps)
    return float(relative_error(analytic, numeric).max(initial=0.0))
