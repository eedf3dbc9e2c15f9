"""Order-agnostic autoregressive transformer that turns a latent vector into
a sequence of object features.

No positional encodings are used anywhere, so the context encoder is
permutation-equivariant in its inputs and the latent-query decoder is
permutation-invariant in the context rows.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, ops, param
from .nn import MLP, LayerNorm, Linear, Module


@dataclass(frozen=True)
class GeneratorConfig:
    d_model: int = 64
    heads: int = 4
    ff_widths: tuple = (128, 64)
    n_max: int = 6
    layer_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ff_widths", tuple(self.ff_widths))
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")
        if self.ff_widths[-1] != self.d_model:
            raise ValueError("feed-forward output width must equal d_model")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ff_widths"] = list(self.ff_widths)
        return d


FULL_SCALE_GENERATOR = GeneratorConfig(d_model=512, heads=4, ff_widths=(1024, 512), n_max=13)


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, heads: int, rng: np.random.Generator):
        self.heads = heads
        self.q = Linear(d_model, d_model, rng)
        self.k = Linear(d_model, d_model, rng)
        self.v = Linear(d_model, d_model, rng)
        self.out = Linear(d_model, d_model, rng)
        self.last_weights = None

    def _split(self, x):
        B, L, d = x.shape
        h = self.heads
        return ops.transpose(ops.reshape(x, (B, L, h, d // h)), (0, 2, 1, 3))

    def __call__(self, query, keys) -> Tensor:
        """query (B, Lq, d) attends over keys/values (B, Lk, d)."""
        B, Lq, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(keys))
        v = self._split(self.v(keys))
        scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(d // self.heads))
        w = ops.softmax(scores, axis=-1)
        self.last_weights = w.value
        ctx = ops.reshape(ops.transpose(ops.matmul(w, v), (0, 2, 1, 3)), (B, Lq, d))
        return self.out(ctx)


class _Identity(Module):
    def __call__(self, x):
        return x


class ContextEncoder(Module):
    """One self-attention layer plus a GeLU feed-forward block (pre-norm)."""

    def __init__(self, cfg: GeneratorConfig, rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ff = MLP((cfg.d_model,) + cfg.ff_widths, rng, activation="gelu")
        self.norm1 = LayerNorm(cfg.d_model) if cfg.layer_norm else _Identity()
        self.norm2 = LayerNorm(cfg.d_model) if cfg.layer_norm else _Identity()

    def __call__(self, x) -> Tensor:
        n = self.norm1(x)
        h = x + self.attn(n, n)
        return h + self.ff(self.norm2(h))


class LatentQueryDecoder(Module):
    """Cross-attention from the latent (as query) onto the scene context."""

    def __init__(self, cfg: GeneratorConfig, rng):
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng)
        self.ff = MLP((cfg.d_model,) + cfg.ff_widths, rng, activation="gelu")
        self.norm1 = LayerNorm(cfg.d_model) if cfg.layer_norm else _Identity()
        self.norm2 = LayerNorm(cfg.d_model) if cfg.layer_norm else _Identity()

    def __call__(self, context, z) -> Tensor:
        q = ops.reshape(z, (z.shape[0], 1, z.shape[-1]))
        y = q + self.attn(self.norm1(q), context)
        y = y + self.ff(self.norm2(y))
        return ops.reshape(y, (z.shape[0], z.shape[-1]))


class SceneGenerator(Module):
    def __init__(self, cfg: GeneratorConfig, rng: np.random.Generator):
        self.cfg = cfg
        bound = 1.0 / np.sqrt(cfg.d_model)
        self.start_token = param(rng.uniform(-bound, bound, cfg.d_model))
        self.encoder = ContextEncoder(cfg, rng)
        self.decoder = LatentQueryDecoder(cfg, rng)

    def encode_context(self, features) -> Tensor:
        """Scene context F (B, k, d) from features (B, k, d); k >= 1."""
        features = as_tensor(features)
        if features.ndim == 2:
            features = ops.reshape(features, (1,) + features.shape)
        if features.shape[1] == 0:
            raise ValueError("context needs at least the start token")
        return self.encoder(features)

    def decode_next(self, context, z) -> Tensor:
        """Next object feature (B, d) from context (B, k, d) and latent (B, d)."""
        context = as_tensor(context)
        z = as_tensor(z)
        if z.ndim == 1:
            z = ops.reshape(z, (1, -1))
        if z.shape[-1] != self.cfg.d_model:
            raise ValueError(f"latent dim {z.shape[-1]} != d_model {self.cfg.d_model}")
        if context.ndim == 2:
            context = ops.reshape(context, (1,) + context.shape)
        return self.decoder(context, z)

    def start(self, batch: int) -> Tensor:
        return ops.broadcast_to(ops.reshape(self.start_token, (1, 1, -1)), (batch, 1, self.cfg.d_model))

    def rollout(self, z, steps: int | None = None) -> Tensor:
        """Features (B, steps + 1, d): the start token followed by x_1..x_steps."""
        z = as_tensor(z)
        if z.ndim == 1:
            z = ops.reshape(z, (1, -1))
        steps = self.cfg.n_max if steps is None else steps
        if steps > self.cfg.n_max:
            raise ValueError(f"steps={steps} exceeds n_max={self.cfg.n_max}")
        feats = self.start(z.shape[0])
        for _ in range(steps):
            x = self.decode_next(self.encode_context(feats), z)
            feats = ops.concat([feats, ops.reshape(x, (x.shape[0], 1, -1))], axis=1)
        return feats
