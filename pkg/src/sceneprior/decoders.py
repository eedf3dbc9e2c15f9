"""Layout and shape heads applied to each object feature.

The layout head predicts class logits, a box centre and size, and a
completeness score; the shape head predicts per-vertex offsets of a
template sphere. Both share the trunk MLP.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, ops
from .nn import MLP, Linear, Module
from .scene import Mesh, ObjectInstance, TemplateSphere

COMPLETENESS_THRESHOLD = 0.5


@dataclass
class LayoutPrediction:
    """Tensors shaped (..., N_c), (..., 3), (..., 3), (...)."""

    logits: Tensor
    center: Tensor  # lifted: bottom of the box is on or above the floor
    size: Tensor
    completeness_logit: Tensor

    @property
    def completeness(self) -> np.ndarray:
        from scipy.special import expit
        return expit(self.completeness_logit.value)

    def class_probs(self) -> np.ndarray:
        from scipy.special import softmax
        return softmax(self.logits.value, axis=-1)


class ObjectDecoder(Module):
    def __init__(self, d_model: int, n_classes: int, rng: np.random.Generator,
                 trunk=(128, 64), shape_hidden=(128, 64)):
        self.n_classes = n_classes
        self.trunk = MLP((d_model,) + tuple(trunk), rng)
        self.head = Linear(trunk[-1], n_classes + 7, rng)
        self.shape = MLP((trunk[-1] + 3,) + tuple(shape_hidden) + (3,), rng)
        # zero offsets at init: stage 2 starts exactly where the layout stage ended
        last = self.shape.layers[-1]
        last.weight.value[...] = 0.0
        last.bias.value[...] = 0.0

    def features(self, x) -> Tensor:
        return self.trunk(as_tensor(x))

    def layout(self, h) -> LayoutPrediction:
        """Layout attributes from trunk features ``h``."""
        nc = self.n_classes
        raw = self.head(h)
        logits = raw[..., :nc]
        size = ops.softplus(raw[..., nc + 3:nc + 6])
        cx = raw[..., nc]
        cy = ops.relu(raw[..., nc + 1]) + size[..., 1] * 0.5
        cz = raw[..., nc + 2]
        center = ops.stack([cx, cy, cz], axis=-1)
        return LayoutPrediction(logits, center, size, raw[..., nc + 6])

    def offsets(self, h, template_vertices) -> Tensor:
        """Per-vertex offsets (..., V, 3) from a pointwise MLP on [h, v]."""
        h = as_tensor(h)
        V = len(template_vertices)
        hb = ops.broadcast_to(ops.reshape(h, h.shape[:-1] + (1, h.shape[-1])), h.shape[:-1] + (V, h.shape[-1]))
        vb = np.broadcast_to(template_vertices, h.shape[:-1] + (V, 3))
        return self.shape(ops.concat([hb, vb], axis=-1))


def decode_layout(decoder: ObjectDecoder, x) -> LayoutPrediction:
    return decoder.layout(decoder.features(x))


def decode_shape(decoder: ObjectDecoder, x, template: TemplateSphere, stage: int = 2) -> Tensor:
    """Offsets for each feature in ``x``; identically zero in stage 1."""
    h = decoder.features(x)
    if stage == 1:
        return Tensor(np.zeros(h.shape[:-1] + (template.n_vertices, 3)))
    return decoder.offsets(h, template.vertices)


def world_vertices(canonical, size, center) -> Tensor:
    """Canonical mesh (..., V, 3) into the world using half-extents, so a unit
    sphere exactly fills its box."""
    size = as_tensor(size)
    center = as_tensor(center)
    half = ops.reshape(size * 0.5, size.shape[:-1] + (1, 3))
    return canonical * half + ops.reshape(center, center.shape[:-1] + (1, 3))


def argmax_label(logits) -> int:
    # np.argmax returns the first maximiser, so ties go to the lower class index
    return int(np.argmax(np.asarray(logits)))


def assemble_object(logits, center, size, offsets, template: TemplateSphere) -> ObjectInstance:
    canon = template.vertices + np.asarray(offsets)
    return ObjectInstance(argmax_label(logits), np.asarray(center), np.asarray(size),
                          Mesh(canon, template.faces))
