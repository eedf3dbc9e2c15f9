"""Two-stage auto-decoder training: layout first, then layout plus shape.

Each training scene owns a row of simplex logits in the embedding table;
those rows and the network weights share one Adam instance. Everything
random is derived from ``(seed, epoch, scene)`` so an interrupted run
resumed from a checkpoint replays the uninterrupted one bit for bit.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Adam, backward, checkpoint, new_tape, no_grad, param, step_decay
from .data import Dataset
from .losses import LossWeights, ViewBatch, match, project_predictions, total_loss
from .model import ModelConfig, ScenePrior, load_model, save_model
from .render import RasterConfig

METRIC_FIELDS = ("epoch", "stage", "lr", "loss", "cls", "box", "completeness", "frustum", "shape",
                 "box_l1", "completeness_acc", "iou")


@dataclass(frozen=True)
class TrainConfig:
    stage1_epochs: int = 3000
    stage2_epochs: int = 300
    lr: float = 5e-4
    stage2_lr: float | None = 1e-4  # None: same base rate as stage 1
    embedding_lr_scale: float = 10.0
    shape_lr_scale: float = 10.0
    stage1_decay: int | None = 2000
    stage2_decay: int | None = 200
    decay_factor: float = 0.1
    batch_size: int | None = None  # None: every scene in each step
    views_per_step: int = 8
    augment: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 1 or self.stage2_epochs < 0:
            raise ValueError("stage 1 needs at least one epoch")
        if self.views_per_step < 1:
            raise ValueError("views_per_step must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def total_epochs(self) -> int:
        return self.stage1_epochs + self.stage2_epochs

    def stage_of(self, epoch: int) -> int:
        return 1 if epoch < self.stage1_epochs else 2

    def lr_at(self, epoch: int) -> float:
        if epoch < self.stage1_epochs:
            return step_decay(self.lr, epoch, self.stage1_decay, self.decay_factor)
        base = self.lr if self.stage2_lr is None else self.stage2_lr
        return step_decay(base, epoch - self.stage1_epochs, self.stage2_decay, self.decay_factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["weights"] = LossWeights(**d.get("weights", {}))
        return cls(**d)


# large-data schedule; the defaults above are tuned for the 8-scene desk set
FULL_SCALE_SCHEDULE = TrainConfig(stage1_epochs=800, stage2_epochs=500, lr=1e-4, stage2_lr=None,
                                  embedding_lr_scale=1.0, shape_lr_scale=1.0, stage1_decay=300,
                                  stage2_decay=300, batch_size=16, views_per_step=20, augment=True)


def load_train_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


class Trainer:
    """Owns the model, the embedding table, the optimizer and the epoch counter."""

    def __init__(self, dataset: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                 model: ScenePrior | None = None):
        if len(dataset) == 0:
            raise ValueError("empty dataset")
        if any(r.n_views == 0 for r in dataset.records):
            raise ValueError("every scene needs at least one view")
        self.cfg = cfg
        self.dataset = dataset.augmented() if cfg.augment else dataset
        if model is None:
            model_cfg = model_cfg or ModelConfig(categories=tuple(dataset.categories.names), seed=cfg.seed)
            model = ScenePrior(model_cfg)
        if model.n_max < max(r.n_objects for r in self.dataset.records):
            raise ValueError("a scene has more objects than the generator's n_max")
        self.model = model
        self.scene_ids = [r.scene_id for r in self.dataset.records]
        self.embeddings = param(np.zeros((len(self.dataset), model.cfg.n_anchors)), "embeddings")
        self.net_params = model.named_params()
        params = list(self.net_params.values()) + [self.embeddings]
        shape_ids = {id(p) for p in model.shape_params()}
        scale = [cfg.shape_lr_scale if id(p) in shape_ids else 1.0 for p in self.net_params.values()]
        scale.append(cfg.embedding_lr_scale)
        self.optimizer = Adam(params, lr=cfg.lr, lr_scale=scale)
        W, H = self.dataset.image_size
        self.raster = RasterConfig(W, H)
        self.epoch = 0

    # -------------------------------------------------------------- sampling

    def batches(self, epoch: int) -> list[np.ndarray]:
        S = len(self.dataset)
        if self.cfg.batch_size is None or self.cfg.batch_size >= S:
            return [np.arange(S)]
        order = np.random.default_rng([self.cfg.seed, epoch, 1 << 20]).permutation(S)
        bs = self.cfg.batch_size
        return [order[i:i + bs] for i in range(0, S, bs)]

    def sample_views(self, epoch: int, scene: int) -> np.ndarray:
        T = self.dataset.records[scene].n_views
        V = min(self.cfg.views_per_step, T)
        rng = np.random.default_rng([self.cfg.seed, epoch, scene])
        return np.sort(rng.choice(T, size=V, replace=False))

    # -------------------------------------------------------------- steps

    def forward(self, idx, views: ViewBatch, stage: int):
        z = self.model.latent(self.embeddings[idx])
        pred = self.model.predict(z, stage=1 if stage == 1 else 2)
        proj = project_predictions(pred, views)
        matches = match(pred, proj, views, self.cfg.weights)
        return total_loss(pred, proj, views, matches, self.cfg.weights, stage,
                          faces=self.model.template.faces, raster=self.raster)

    def train_epoch(self) -> dict:
        epoch = self.epoch
        stage = self.cfg.stage_of(epoch)
        self.optimizer.lr = self.cfg.lr_at(epoch)
        records = []
        for idx in self.batches(epoch):
            views = self.dataset.batch(idx, [self.sample_views(epoch, int(s)) for s in idx])
            self.optimizer.zero_grad()
            with new_tape():
                out = self.forward(idx, views, stage)
                backward(out.total)
            self.optimizer.step()
            records.append((len(idx), out))
        self.epoch += 1
        return _epoch_record(epoch, stage, self.optimizer.lr, records)

    def run(self, until: int | None = None, log_path=None, callback=None) -> list[dict]:
        """Train up to epoch ``until`` (default: end of schedule); append CSV rows to ``log_path``."""
        until = self.cfg.total_epochs if until is None else min(until, self.cfg.total_epochs)
        rows = []
        while self.epoch < until:
            row = self.train_epoch()
            rows.append(row)
            if log_path is not None:
                append_metrics(log_path, row)
            if callback is not None:
                callback(row)
        return rows

    # -------------------------------------------------------------- persistence

    def save(self, path) -> None:
        extra = {"embeddings": self.embeddings.value, "epoch": np.array(float(self.epoch))}
        extra.update({f"opt.{k}": v for k, v in self.optimizer.state_arrays().items()})
        save_model(path, self.model, extra, {"train": self.cfg.to_dict(), "scene_ids": self.scene_ids})

    @classmethod
    def load(cls, path, dataset: Dataset, cfg: TrainConfig | None = None) -> "Trainer":
        model, rest, meta = load_model(path)
        cfg = cfg or TrainConfig.from_dict(meta["train"])
        tr = cls(dataset, cfg, model=model)
        if rest["embeddings"].shape != tr.embeddings.shape:
            raise ValueError("checkpoint embedding table does not match the dataset")
        tr.embeddings.value[...] = rest["embeddings"]
        tr.optimizer.load_state_arrays({k[4:]: v for k, v in rest.items() if k.startswith("opt.")})
        tr.epoch = int(rest["epoch"])
        return tr


def _epoch_record(epoch, stage, lr, records) -> dict:
    total = sum(k for k, _ in records)
    row = {"epoch": epoch, "stage": stage, "lr": lr,
           "loss": sum(k * float(o.total.value) for k, o in records) / total}
    for name in ("cls", "box", "completeness", "frustum", "shape"):
        vals = [(k, o.terms[name]) for k, o in records if name in o.terms]
        row[name] = sum(k * float(np.asarray(getattr(v, "value", v))) for k, v in vals) / total if vals else ""
    row["box_l1"] = _weighted(records, "box_l1")
    row["completeness_acc"] = _weighted(records, "completeness_acc")
    row["iou"] = _weighted(records, "shape_iou") if stage == 2 else ""
    return row


def _weighted(records, key):
    vals = [(k, o.stats[key]) for k, o in records if key in o.stats and np.isfinite(o.stats[key])]
    if not vals:
        return float("nan")
    return sum(k * v for k, v in vals) / sum(k for k, _ in vals)


def append_metrics(path, row: dict) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        if new:
            w.writeheader()
        w.writerow({k: row.get(k, "") for k in METRIC_FIELDS})


def read_metrics(path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def evaluate_epoch(trainer: Trainer, stage: int | None = None) -> dict:
    """Layout loss, box L1, completeness accuracy and (stage 2) silhouette IoU.

    At desk scale every view is held in, so each scene is scored on its full
    ring rather than a resampled subset. ``object_iou`` averages, per matched
    object, the thresholded-silhouette IoU over its supervised views, then
    averages over objects; ``iou`` is the plain mean over (object, view) pairs.
    """
    stage = stage or trainer.cfg.stage_of(max(trainer.epoch - 1, 0))
    ds = trainer.dataset
    cols = {"layout_loss": [], "box_l1": [], "completeness_acc": [], "iou": []}
    weight = []
    per_object = []
    with no_grad():
        for s in range(len(ds)):
            vb = ds.batch([s], [np.arange(ds.records[s].n_views)])
            res = trainer.forward(np.array([s]), vb, stage)
            w = trainer.cfg.weights
            lay = sum(float(np.asarray(getattr(v, "value", v))) * getattr(w, k)
                      for k, v in res.terms.items() if k != "shape")
            cols["layout_loss"].append(lay)
            cols["box_l1"].append(res.stats["box_l1"])
            cols["completeness_acc"].append(res.stats["completeness_acc"])
            cols["iou"].append(res.stats.get("shape_iou", np.nan))
            weight.append(ds.records[s].n_objects)
            if "shape_pair_object" in res.stats:
                obj = res.stats["shape_pair_object"]
                iou = res.stats["shape_iou_per_pair"]
                per_object.extend(float(iou[obj == o].mean()) for o in np.unique(obj))
    w = np.array(weight, dtype=np.float64)
    rec = {"epoch": trainer.epoch, "stage": stage}
    for k, v in cols.items():
        v = np.array(v, dtype=np.float64)
        ok = np.isfinite(v)
        rec[k] = float(np.sum(v[ok] * w[ok]) / np.sum(w[ok])) if ok.any() else float("nan")
    rec["object_iou"] = float(np.mean(per_object)) if per_object else float("nan")
    return rec


def sidecar_paths(ckpt) -> dict:
    """Files written next to a checkpoint by :func:`train`."""
    ckpt = Path(ckpt)
    stem = ckpt.with_suffix("")
    return {"stage1": Path(f"{stem}.stage1{ckpt.suffix}"), "metrics": Path(f"{stem}.metrics.csv")}


def train(dataset: Dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
          out=None, callback=None) -> Trainer:
    """Full two-stage schedule.

    With ``out`` set, the final checkpoint goes there, the end-of-stage-1
    checkpoint and the per-epoch metrics CSV beside it.
    """
    tr = Trainer(dataset, cfg, model_cfg)
    log = None
    if out is not None:
        side = sidecar_paths(out)
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        log = side["metrics"]
        if log.exists():
            log.unlink()
    tr.run(until=cfg.stage1_epochs, log_path=log, callback=callback)
    if out is not None:
        tr.save(side["stage1"])
    tr.run(log_path=log, callback=callback)
    if out is not None:
        tr.save(out)
    return tr
