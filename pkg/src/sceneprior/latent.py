"""Hypersphere latent space built from fixed anchor directions.

A latent vector is the normalised convex combination of ``M`` unit anchors,
with the convex weights given by a softmax over free logits.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, ops

DEFAULT_ANCHORS = 256


class DegenerateLatentError(ValueError):
    pass


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # (M, D_z), unit rows

    @property
    def count(self) -> int:
        return self.anchors.shape[0]

    @property
    def dim(self) -> int:
        return self.anchors.shape[1]


def init_anchors(count: int = DEFAULT_ANCHORS, dim: int = 64, seed: int = 0) -> AnchorSet:
    """Draw ``count`` directions uniformly on the unit sphere in ``dim`` dimensions."""
    if count < 2 or dim < 2:
        raise ValueError(f"need count >= 2 and dim >= 2, got count={count}, dim={dim}")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((count, dim))
    g = np.stack([_exact_unit(row) for row in g])
    g.setflags(write=False)
    return AnchorSet(g)


def _exact_unit(v: np.ndarray) -> np.ndarray:
    # nudge by ulps until sqrt(sum(v*v)) is exactly 1.0, so that one-hot
    # weights reproduce the anchor bit-for-bit after normalisation
    v = v / np.sqrt(np.sum(v * v))
    for _ in range(64):
        n = np.sqrt(np.sum(v * v))
        if n == 1.0:
            break
        i = int(np.argmax(np.abs(v)))
        v[i] = np.nextafter(v[i], 0.0 if n > 1.0 else np.copysign(np.inf, v[i]))
    return v


def simplex_weights(logits):
    return ops.softmax(logits, axis=-1)


def compose_latent(anchors: AnchorSet, logits) -> Tensor:
    """z = sum_i w_i phi_i / ||sum_i w_i phi_i|| with w = softmax(logits).

    ``logits`` may be batched, shape (..., M); the result is (..., D_z).
    """
    return combine(anchors, simplex_weights(logits))


def combine(anchors: AnchorSet, w) -> Tensor:
    """Normalised combination for explicit simplex weights ``w``."""
    w = as_tensor(w)
    mix = ops.matmul(ops.reshape(w, w.shape[:-1] + (1, anchors.count)), anchors.anchors)
    mix = ops.reshape(mix, w.shape[:-1] + (anchors.dim,))
    n = ops.norm(mix, axis=-1, keepdims=True)
    if np.any(n.value < 1e-10):
        raise DegenerateLatentError("weighted anchor combination has (near) zero norm")
    return mix / n


def random_logits(count: int, seed) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(count)


def random_latent(anchors: AnchorSet, seed) -> np.ndarray:
    """Latent from softmax-of-Gaussian weights; deterministic in ``seed``."""
    return compose_latent(anchors, random_logits(anchors.count, seed)).value


def slerp(za, zb, t: float) -> np.ndarray:
    """Great-circle interpolation between unit vectors ``za`` and ``zb``."""
    za = np.asarray(za, dtype=np.float64)
    zb = np.asarray(zb, dtype=np.float64)
    if t == 0.0:
        return za.copy()
    if t == 1.0:
        return zb.copy()
    omega = float(np.arccos(np.clip(np.dot(za, zb), -1.0, 1.0)))
    if omega > np.pi - 1e-6:
        raise ValueError("antipodal latents: geodesic is not unique")
    if omega < 1e-6:
        z = (1.0 - t) * za + t * zb
        return z / np.linalg.norm(z)
    so = np.sin(omega)
    z = np.sin((1.0 - t) * omega) / so * za + np.sin(t * omega) / so * zb
    # renormalise: removes the ~1e-16 drift so unit norm holds to 1e-12
    return z / np.linalg.norm(z)
