"""Downstream uses of a trained prior, plus the 3D metrics used to score them."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .autodiff import RMSprop, backward, new_tape, param, step_decay
from .latent import random_latent, slerp
from .losses import LossWeights, ViewBatch, hungarian, match, project_predictions, total_loss
from .model import ScenePrior
from .render import RasterConfig
from .scene import TOY_CATEGORIES, CategoryTable, Mesh, ObjectInstance, Scene, face_areas

CHAMFER_SAMPLES = 1024
KL_EPS = 1e-8
YAW_ANGLES = (0, 90, 180, 270)


# ------------------------------------------------------------------ generation

def synthesize(model: ScenePrior, seed, stage: int = 2) -> Scene:
    """Decode a random latent; truncated at the first object with p < 0.5."""
    return model.decode_scene(random_latent(model.anchors, seed), stage=stage)


def synthesize_many(model: ScenePrior, count: int, seed: int = 0, stage: int = 2) -> list[Scene]:
    return [synthesize(model, [seed, i], stage) for i in range(count)]


def interpolate(model: ScenePrior, za, zb, steps: int, stage: int = 2) -> list[Scene]:
    """Scenes along the great circle from ``za`` to ``zb`` at t = i / (steps - 1)."""
    if steps < 2:
        raise ValueError("interpolation needs at least 2 steps")
    return [model.decode_scene(slerp(za, zb, i / (steps - 1)), stage=stage) for i in range(steps)]


# ------------------------------------------------------------------ reconstruction

@dataclass
class Reconstruction:
    scene: Scene
    logits: np.ndarray
    losses: list = field(default_factory=list)


def reconstruct_single_view(model: ScenePrior, view: ViewBatch, iterations: int = 1000, lr: float = 0.01,
                            decay_at: int | None = 500, init_logits=None,
                            weights: LossWeights | None = None, stage: int = 2,
                            raster: RasterConfig | None = None) -> Reconstruction:
    """Fit fresh latent logits to one annotated view with the network frozen.

    The completeness term is left out, so the objects past the annotated
    count are unconstrained; the first ``n`` decoded objects are returned.
    """
    if view.batch != 1 or view.n_views != 1:
        raise ValueError("expected a single scene observed in a single view")
    n = int(view.n_objects[0])
    if n < 1:
        raise ValueError("view has no annotated objects")
    weights = weights or LossWeights()
    W, H = view.image_size
    raster = raster or RasterConfig(W, H)
    u0 = np.zeros(model.cfg.n_anchors) if init_logits is None else np.asarray(init_logits, dtype=np.float64)
    logits = param(u0.reshape(1, -1).copy(), "logits")
    opt = RMSprop([logits], lr=lr)
    faces = model.template.faces
    history = []
    for it in range(iterations):
        opt.lr = step_decay(lr, it, decay_at)
        opt.zero_grad()
        with new_tape():
            pred = model.predict(model.latent(logits), stage=stage)
            proj = project_predictions(pred, view)
            matches = match(pred, proj, view, weights)
            out = total_loss(pred, proj, view, matches, weights, stage, faces=faces, raster=raster,
                             use_completeness=False)
            backward(out.total)
        # the network stays frozen: only the latent logits are updated
        opt.step()
        history.append(float(out.total.value))
    z = model.latent(logits.value[0]).value
    return Reconstruction(model.decode_scene(z, stage=stage, keep=n), logits.value[0].copy(), history)


# ------------------------------------------------------------------ metrics

def category_histogram(scenes, n_categories: int) -> np.ndarray:
    h = np.zeros(n_categories)
    for s in scenes:
        for lab in s.labels():
            h[lab] += 1
    return h


def category_kl(pred_hist, gt_hist, eps: float = KL_EPS, skip_void: bool = True) -> float:
    """KL(pred || gt) between normalised category histograms with eps smoothing."""
    p = np.asarray(pred_hist, dtype=np.float64)
    q = np.asarray(gt_hist, dtype=np.float64)
    if skip_void:
        p, q = p[1:], q[1:]
    p = p / max(p.sum(), 1e-300) + eps
    q = q / max(q.sum(), 1e-300) + eps
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def box_iou_3d(center_a, size_a, center_b, size_b) -> float:
    """Axis-aligned 3D box IoU."""
    ca, sa = np.asarray(center_a, float), np.asarray(size_a, float)
    cb, sb = np.asarray(center_b, float), np.asarray(size_b, float)
    lo = np.maximum(ca - sa / 2, cb - sb / 2)
    hi = np.minimum(ca + sa / 2, cb + sb / 2)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = float(np.prod(sa) + np.prod(sb)) - inter
    return inter / union if union > 0 else 0.0


def sample_surface(vertices, faces, count: int = CHAMFER_SAMPLES, seed=0) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces)
    rng = np.random.default_rng(seed)
    area = face_areas(vertices, faces)
    cdf = np.cumsum(area)
    pick = np.searchsorted(cdf, rng.uniform(0.0, cdf[-1], count), side="right")
    pick = np.minimum(pick, len(faces) - 1)
    r1 = np.sqrt(rng.uniform(size=count))
    r2 = rng.uniform(size=count)
    a, b, c = (vertices[faces[pick, i]] for i in range(3))
    return (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c


def chamfer(a, b) -> float:
    """Symmetric chamfer: mean of the two mean nearest-neighbour L2 distances."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def object_chamfer(a: ObjectInstance, b: ObjectInstance, count: int = CHAMFER_SAMPLES, seed=0) -> float:
    pa = sample_surface(a.world_vertices(), a.mesh.faces, count, seed)
    pb = sample_surface(b.world_vertices(), b.mesh.faces, count, seed)
    return chamfer(pa, pb)


def match_objects(pred: Scene, gt: Scene, class_cost: float = 1.0) -> list[tuple[int, int]]:
    """Pairs (pred index, gt index) minimising centre L1 plus a label-mismatch cost."""
    if not len(pred) or not len(gt):
        return []
    cost = np.array([[np.abs(p.center - g.center).sum() + class_cost * (p.label != g.label)
                      for g in gt.objects] for p in pred.objects])
    if cost.shape[0] <= cost.shape[1]:
        sigma = hungarian(cost)
        return [(k, int(j)) for k, j in enumerate(sigma) if j >= 0]
    sigma = hungarian(cost.T)
    return [(int(k), j) for j, k in enumerate(sigma) if k >= 0]


@dataclass
class MetricsReport:
    kl: float = float("nan")
    box_iou: float = float("nan")
    chamfer: float = float("nan")
    pairs: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.update(d.pop("extra"))
        return d


def geometry_metrics(preds, gts, samples: int = CHAMFER_SAMPLES, seed=0) -> MetricsReport:
    """Mean 3D box IoU and chamfer over Hungarian-paired objects of paired scenes."""
    ious, cds = [], []
    for si, (p, g) in enumerate(zip(preds, gts)):
        for k, j in match_objects(p, g):
            a, b = p.objects[k], g.objects[j]
            ious.append(box_iou_3d(a.center, a.size, b.center, b.size))
            if a.mesh is not None and b.mesh is not None:
                cds.append(object_chamfer(a, b, samples, [seed, si, j]))
    return MetricsReport(box_iou=float(np.mean(ious)) if ious else float("nan"),
                         chamfer=float(np.mean(cds)) if cds else float("nan"), pairs=len(ious))


def metrics(preds, gts, n_categories: int | None = None) -> MetricsReport:
    n_categories = n_categories or len(gts[0].categories)
    rep = geometry_metrics(preds, gts) if len(preds) == len(gts) else MetricsReport()
    rep.kl = category_kl(category_histogram(preds, n_categories), category_histogram(gts, n_categories))
    return rep


def write_report(path, report: dict) -> None:
    """JSON at ``path``; a flat one-row CSV alongside with the scalar entries."""
    path = Path(path)
    path.write_text(json.dumps(report, indent=1, default=float))
    flat = {k: v for k, v in report.items() if isinstance(v, (int, float, str))}
    with path.with_suffix(".csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(flat))
        w.writeheader()
        w.writerow(flat)


# ------------------------------------------------------------------ retrieval

def yaw_matrix(degrees: int) -> np.ndarray:
    a = np.deg2rad(degrees)
    c, s = np.round(np.cos(a), 15), np.round(np.sin(a), 15)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass
class RetrievalResult:
    name: str
    rotation: int
    chamfer: float
    object: ObjectInstance
    scores: dict = field(default_factory=dict)


def placement_box(obj: ObjectInstance) -> tuple[np.ndarray, np.ndarray]:
    """Box that retrieved meshes are fitted into; low objects are extended to the floor."""
    center, size = obj.center.copy(), obj.size.copy()
    if center[1] <= 1.0:
        top = center[1] + size[1] / 2
        size[1] = top
        center[1] = top / 2
    return center, size


def retrieve_shape(obj: ObjectInstance, library: dict, categories: CategoryTable = TOY_CATEGORIES,
                   samples: int = CHAMFER_SAMPLES, seed=0) -> RetrievalResult:
    """Closest library mesh of the object's category over four yaw rotations.

    ``library`` maps category name to an ordered {mesh name: canonical mesh}
    shelf. Ties resolve to the earliest (library order, rotation order) pair.
    """
    cat = categories.names[obj.label] if 0 <= obj.label < len(categories) else str(obj.label)
    shelf = library.get(cat)
    if not shelf:
        raise KeyError(f"no library meshes for category {cat!r}")
    query = sample_surface(obj.world_vertices(), obj.mesh.faces, samples, seed)
    center, size = placement_box(obj)
    best = None
    scores = {}
    for name, mesh in shelf.items():
        for deg in YAW_ANGLES:
            cand = ObjectInstance(obj.label, center, size, Mesh(mesh.vertices @ yaw_matrix(deg).T, mesh.faces))
            cd = chamfer(query, sample_surface(cand.world_vertices(), mesh.faces, samples, seed))
            scores[(name, deg)] = cd
            if best is None or cd < best[0]:
                best = (cd, name, deg, cand)
    cd, name, deg, cand = best
    return RetrievalResult(name, deg, cd, cand, scores)


def retrieve_scene(scene: Scene, library: dict, samples: int = CHAMFER_SAMPLES) -> Scene:
    objs = [retrieve_shape(o, library, scene.categories, samples, seed=i).object
            for i, o in enumerate(scene.objects)]
    return Scene(objs, scene.categories)
