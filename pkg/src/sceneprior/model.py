"""The full latent-to-scene mapping and its checkpoint layout."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, checkpoint, no_grad, ops
from .decoders import COMPLETENESS_THRESHOLD, ObjectDecoder, assemble_object, world_vertices
from .generator import GeneratorConfig, SceneGenerator
from .latent import AnchorSet, compose_latent, init_anchors
from .losses import Predictions
from .scene import TOY_CATEGORIES, CategoryTable, Scene, make_icosphere

CONFIG_SUFFIX = ".json"


@dataclass(frozen=True)
class ModelConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    categories: tuple = TOY_CATEGORIES.names
    n_anchors: int = 256
    template_level: int = 2
    trunk: tuple = (128, 64)
    shape_hidden: tuple = (128, 64)
    seed: int = 0

    def to_dict(self) -> dict:
        return {"generator": self.generator.to_dict(), "categories": list(self.categories),
                "n_anchors": self.n_anchors, "template_level": self.template_level,
                "trunk": list(self.trunk), "shape_hidden": list(self.shape_hidden), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(GeneratorConfig(**d["generator"]), tuple(d["categories"]), d["n_anchors"],
                   d["template_level"], tuple(d["trunk"]), tuple(d["shape_hidden"]), d["seed"])


class ScenePrior:
    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.categories = CategoryTable(cfg.categories)
        rng = np.random.default_rng(cfg.seed)
        self.anchors: AnchorSet = init_anchors(cfg.n_anchors, cfg.generator.d_model, seed=cfg.seed)
        self.template = make_icosphere(cfg.template_level)
        self.generator = SceneGenerator(cfg.generator, rng)
        self.decoder = ObjectDecoder(cfg.generator.d_model, len(self.categories), rng,
                                     cfg.trunk, cfg.shape_hidden)

    @property
    def n_max(self) -> int:
        return self.cfg.generator.n_max

    def named_params(self) -> dict[str, Tensor]:
        out = {f"generator.{k}": v for k, v in self.generator.named_params().items()}
        out.update({f"decoder.{k}": v for k, v in self.decoder.named_params().items()})
        return out

    def shape_params(self) -> list[Tensor]:
        return list(self.decoder.shape.parameters())

    def latent(self, logits) -> Tensor:
        return compose_latent(self.anchors, logits)

    def predict(self, z, stage: int = 2, steps: int | None = None) -> Predictions:
        """Decode latents (B, D_z) into per-object predictions (B, N, ...)."""
        z = as_tensor(z)
        if z.ndim == 1:
            z = ops.reshape(z, (1, -1))
        feats = self.generator.rollout(z, steps)
        x = feats[:, 1:]
        h = self.decoder.features(x)
        lay = self.decoder.layout(h)
        tmpl = self.template.vertices
        if stage == 1:
            canon = Tensor(np.broadcast_to(tmpl, h.shape[:-1] + tmpl.shape).copy())
        else:
            canon = self.decoder.offsets(h, tmpl) + tmpl
        verts = world_vertices(canon, lay.size, lay.center)
        return Predictions(lay.logits, lay.center, lay.size, lay.completeness_logit, verts)

    def decode_scene(self, z, stage: int = 2, truncate: bool = True, keep: int | None = None) -> Scene:
        """Scene for a single latent.

        With ``truncate`` the rollout stops before the first object whose
        completeness falls below 0.5; ``keep`` instead returns the first
        ``keep`` objects. Void-labelled objects are dropped.
        """
        with no_grad():
            pred = self.predict(np.asarray(z, dtype=np.float64).reshape(1, -1), stage)
        N = pred.completeness_logit.shape[1]
        p = 1.0 / (1.0 + np.exp(-pred.completeness_logit.value[0]))
        count = N
        if keep is not None:
            count = min(keep, N)
        elif truncate:
            below = np.nonzero(p < COMPLETENESS_THRESHOLD)[0]
            count = int(below[0]) if len(below) else N
        verts = pred.vertices.value[0]
        objs = []
        for k in range(count):
            half = pred.size.value[0, k] / 2.0
            canon = (verts[k] - pred.center.value[0, k]) / half
            obj = assemble_object(pred.logits.value[0, k], pred.center.value[0, k], pred.size.value[0, k],
                                  canon - self.template.vertices, self.template)
            if obj.label != 0:
                objs.append(obj)
        return Scene(objs, self.categories)

    # -------------------------------------------------------------- persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.value for k, v in self.named_params().items()}

    def load_state_arrays(self, arrays: dict) -> None:
        for k, v in self.named_params().items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks parameter {k}")
            if arrays[k].shape != v.shape:
                raise ValueError(f"{k}: checkpoint shape {arrays[k].shape} != model shape {v.shape}")
            v.value[...] = arrays[k]


def save_model(path, model: ScenePrior, extra: dict | None = None, meta: dict | None = None) -> None:
    arrays = {f"model.{k}": v for k, v in model.state_arrays().items()}
    arrays.update(extra or {})
    checkpoint.save(path, arrays)
    side = {"model": model.cfg.to_dict()}
    side.update(meta or {})
    Path(str(path) + CONFIG_SUFFIX).write_text(json.dumps(side, indent=1))


def load_model(path) -> tuple[ScenePrior, dict, dict]:
    """Returns (model, remaining arrays, sidecar metadata)."""
    meta = json.loads(Path(str(path) + CONFIG_SUFFIX).read_text())
    model = ScenePrior(ModelConfig.from_dict(meta["model"]))
    arrays = checkpoint.load(path)
    model.load_state_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("model.")})
    rest = {k: v for k, v in arrays.items() if not k.startswith("model.")}
    return model, rest, meta
