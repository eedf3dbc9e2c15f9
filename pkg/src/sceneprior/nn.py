"""Minimal parameter containers: dense layers and MLPs."""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor, as_tensor, ops, param


class Module:
    """Holds named trainable tensors; submodules are collected recursively."""

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_params(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_params(f"{name}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_params().values())


class Linear(Module):
    """y = x W + b, weights uniform in +-1/sqrt(fan_in)."""

    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        bound = 1.0 / np.sqrt(fan_in)
        self.weight = param(rng.uniform(-bound, bound, (fan_in, fan_out)))
        self.bias = param(rng.uniform(-bound, bound, fan_out))

    def __call__(self, x) -> Tensor:
        x = as_tensor(x)
        if x.ndim == 1:  # a single row vector
            return ops.reshape(ops.linear(ops.reshape(x, (1, -1)), self.weight, self.bias), (-1,))
        return ops.linear(x, self.weight, self.bias)


class MLP(Module):
    """Dense stack with ReLU (or GeLU) between layers and none after the last."""

    def __init__(self, widths, rng: np.random.Generator, activation: str = "relu"):
        self.layers = [Linear(a, b, rng) for a, b in zip(widths[:-1], widths[1:])]
        self.activation = activation

    def __call__(self, x) -> Tensor:
        act = ops.gelu if self.activation == "gelu" else ops.relu
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = param(np.ones(dim))
        self.bias = param(np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias)
