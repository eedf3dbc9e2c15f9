"""One-call scoring of a trained run: fit quality, synthesis and reconstruction."""
from __future__ import annotations

import time
from pathlib import Path

import numpy as np

from .data import Dataset, load_dataset, single_view_batch
from .scene import Scene
from .tasks import category_histogram, category_kl, geometry_metrics, reconstruct_single_view, synthesize_many
from .training import Trainer, evaluate_epoch, sidecar_paths


def reconstruction_views(dataset: Dataset, count: int) -> list[tuple[int, int]]:
    """(scene, view) pairs, one per scene, spread around each ring."""
    out = []
    for s, r in enumerate(dataset.records[:count]):
        view = (5 * s) % r.n_views
        if not r.visible[:, view].any():
            view = int(np.argmax(r.visible.sum(axis=0)))
        out.append((s, view))
    return out


def reconstruction_metrics(model, dataset: Dataset, count: int = 8, iterations: int = 1000) -> dict:
    preds, gts, rows = [], [], []
    for s, view in reconstruction_views(dataset, count):
        rec = dataset.records[s]
        keep = np.nonzero(rec.visible[:, view])[0]
        out = reconstruct_single_view(model, single_view_batch(rec, view), iterations=iterations,
                                      decay_at=iterations // 2)
        gt = Scene([rec.scene.objects[j] for j in keep], rec.scene.categories)
        m = geometry_metrics([out.scene], [gt])
        rows.append({"scene": rec.scene_id, "view": view, "objects": len(keep),
                     "box_iou": m.box_iou, "chamfer": m.chamfer})
        preds.append(out.scene)
        gts.append(gt)
    m = geometry_metrics(preds, gts)
    return {"recon_box_iou": m.box_iou, "recon_chamfer": m.chamfer, "recon_pairs": m.pairs,
            "recon_views": rows}


def synthesis_metrics(model, dataset: Dataset, samples: int = 1000, seed: int = 0) -> dict:
    scenes = synthesize_many(model, samples, seed=seed)
    n_cat = len(dataset.categories)
    hp = category_histogram(scenes, n_cat)
    hg = dataset.category_histogram()
    counts = np.bincount([len(s) for s in scenes], minlength=1)
    return {"synthesis_kl": category_kl(hp, hg), "synthesis_histogram": hp.tolist(),
            "train_histogram": hg.tolist(), "synthesis_object_counts": counts.tolist()}


def evaluate_run(ckpt, data, samples: int = 1000, recon_views: int = 8,
                 recon_iterations: int = 1000) -> dict:
    """Everything the acceptance criteria look at, for a checkpoint written by ``train``."""
    ds = load_dataset(data) if not isinstance(data, Dataset) else data
    report: dict = {"checkpoint": str(ckpt)}
    t0 = time.perf_counter()
    stage1 = sidecar_paths(ckpt)["stage1"]
    if Path(stage1).exists():
        s1 = evaluate_epoch(Trainer.load(stage1, ds), stage=1)
        report.update({"stage1_box_l1": s1["box_l1"], "stage1_completeness_acc": s1["completeness_acc"]})
    tr = Trainer.load(ckpt, ds)
    s2 = evaluate_epoch(tr, stage=2)
    report.update({"box_l1": s2["box_l1"], "completeness_acc": s2["completeness_acc"],
                   "silhouette_iou": s2["object_iou"], "pair_iou": s2["iou"]})
    if samples:
        report.update(synthesis_metrics(tr.model, ds, samples))
    if recon_views:
        report.update(reconstruction_metrics(tr.model, ds, recon_views, recon_iterations))
    report["seconds"] = time.perf_counter() - t0
    return report
