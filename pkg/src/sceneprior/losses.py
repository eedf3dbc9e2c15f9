"""Bipartite matching and the 2D view losses.

Everything is batched over B scenes that each carry V sampled views.
Ground truth is constant; only predictions carry gradients. A matching is
recomputed from the current predictions at every step and is treated as a
constant inside that step.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import softmax

from .autodiff import Tensor, ops
from .geometry import Z_NEAR, box_from_projection, project_batch
from .render import RasterConfig, soft_silhouette

INVISIBLE_BOX_PENALTY = 2.0
IOU_GATE = 0.5


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    box: float = 5.0
    completeness: float = 1.0
    frustum: float = 1.0
    shape: float = 2.0
    match_box: float = 5.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ViewBatch:
    """Constant supervision for B scenes x V views.

    Per-object arrays are padded to ``n_pad`` objects; ``visible`` is False on
    padding. Boxes are (x1, y1, x2, y2) in normalised image coordinates.
    """

    R: np.ndarray  # (B, V, 3, 3)
    t: np.ndarray  # (B, V, 3)
    intr: np.ndarray  # (B, V, 4)
    image_size: tuple  # (W, H)
    labels: np.ndarray  # (B, n_pad) int
    n_objects: np.ndarray  # (B,)
    boxes: np.ndarray  # (B, n_pad, V, 4)
    visible: np.ndarray  # (B, n_pad, V) bool
    masks: np.ndarray | None = None  # (B, n_pad, V, H, W) bool

    @property
    def batch(self) -> int:
        return self.R.shape[0]

    @property
    def n_views(self) -> int:
        return self.R.shape[1]

    @property
    def cam_centers(self) -> np.ndarray:
        return -np.einsum("bvji,bvj->bvi", self.R, self.t)

    def gt_rays(self) -> np.ndarray:
        """(B, n_pad, V, 3) world directions from each camera through each box centre."""
        W, H = self.image_size
        uc = 0.5 * (self.boxes[..., 0] + self.boxes[..., 2]) * W
        vc = 0.5 * (self.boxes[..., 1] + self.boxes[..., 3]) * H
        fx, fy, cx, cy = (self.intr[:, None, :, i] for i in range(4))
        d_cam = np.stack([(uc - cx) / fx, (vc - cy) / fy, np.ones_like(uc)], axis=-1)
        return np.einsum("bvji,bnvj->bnvi", self.R, d_cam)


@dataclass
class Predictions:
    logits: Tensor  # (B, N, N_c)
    center: Tensor  # (B, N, 3)
    size: Tensor  # (B, N, 3)
    completeness_logit: Tensor  # (B, N)
    vertices: Tensor  # (B, N, Vt, 3) world


@dataclass
class Projected:
    u: Tensor  # (B, V, N, Vt)
    v: Tensor
    depth: Tensor
    boxes: Tensor  # (B, V, N, 4)
    center_in_frustum: np.ndarray  # (B, V, N) bool


@dataclass
class LossTerms:
    total: Tensor
    terms: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


def project_predictions(pred: Predictions, views: ViewBatch) -> Projected:
    B, N, Vt, _ = pred.vertices.shape
    V = views.n_views
    pts = ops.reshape(pred.vertices, (B, 1, N * Vt, 3))
    u, v, z = project_batch(pts, views.R, views.t, views.intr, views.image_size)
    u = ops.reshape(u, (B, V, N, Vt))
    v = ops.reshape(v, (B, V, N, Vt))
    z = ops.reshape(z, (B, V, N, Vt))
    valid = z.value > Z_NEAR
    # rows without any vertex in front get a placeholder box; they are routed
    # to the frustum term and never reach the box loss
    valid = np.where(valid.any(axis=-1, keepdims=True), valid, True)
    boxes = box_from_projection(u, v, valid)
    cu, cv, cz = project_batch(ops.reshape(pred.center, (B, 1, N, 3)).value,
                               views.R, views.t, views.intr, views.image_size)
    cu, cv, cz = cu.value, cv.value, cz.value
    inside = (cz > Z_NEAR) & (cu >= 0) & (cu <= 1) & (cv >= 0) & (cv <= 1)
    inside &= (z.value > Z_NEAR).any(axis=-1)
    return Projected(u, v, z, boxes, inside)


# ------------------------------------------------------------------ matching

def box_l1(a, b) -> np.ndarray:
    """Mean absolute coordinate difference between (..., 4) boxes."""
    return np.abs(np.asarray(a) - np.asarray(b)).mean(axis=-1)


def build_cost_matrix(class_probs, pred_boxes, pred_visible, gt_labels, gt_boxes, gt_visible,
                      box_weight: float = 5.0) -> np.ndarray:
    """Matching cost between K predictions and J ground-truth objects.

    class_probs (K, N_c); pred_boxes (K, V, 4); pred_visible (K, V) bool;
    gt_labels (J,); gt_boxes (J, V, 4); gt_visible (J, V) bool.
    Entry (k, j) = -prob_k[l_j] + box_weight * mean over views where j is
    visible of L1(b_k, b_j), using 2.0 where k is not visible.
    """
    class_probs = np.asarray(class_probs)
    cls = -class_probs[:, np.asarray(gt_labels, dtype=np.int64)]
    d = box_l1(np.asarray(pred_boxes)[:, None], np.asarray(gt_boxes)[None])  # (K, J, V)
    d = np.where(np.asarray(pred_visible)[:, None, :], d, INVISIBLE_BOX_PENALTY)
    vis = np.asarray(gt_visible)[None].astype(np.float64)
    cnt = vis.sum(axis=-1)
    box = np.where(cnt > 0, (d * vis).sum(axis=-1) / np.maximum(cnt, 1), 0.0)
    return cls + box_weight * box


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment; ``result[k]`` is the column matched to row k,
    or -1 when rows outnumber columns."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = linear_sum_assignment(cost)
    out = np.full(cost.shape[0], -1, dtype=np.int64)
    out[rows] = cols
    return out


def assignment_cost(cost, sigma) -> float:
    cost = np.asarray(cost)
    return float(sum(cost[k, j] for k, j in enumerate(sigma) if j >= 0))


def match(pred: Predictions, proj: Projected, views: ViewBatch, weights: LossWeights) -> list:
    """Per-scene assignment of the first n predictions to the n ground-truth objects."""
    probs = softmax(pred.logits.value, axis=-1)
    boxes = proj.boxes.value
    out = []
    for b in range(views.batch):
        n = int(views.n_objects[b])
        if n == 0:
            out.append(np.zeros(0, dtype=np.int64))
            continue
        cost = build_cost_matrix(
            probs[b, :n], np.swapaxes(boxes[b, :, :n], 0, 1), proj.center_in_frustum[b, :, :n].T,
            views.labels[b, :n], views.boxes[b, :n], views.visible[b, :n], weights.match_box)
        out.append(hungarian(cost))
    return out


# ------------------------------------------------------------------ losses

def _matched_arrays(matches, views: ViewBatch, N: int):
    """Ground truth permuted into prediction order (padding where unmatched)."""
    B, V = views.batch, views.n_views
    gt_index = np.full((B, N), -1, dtype=np.int64)
    for b, sigma in enumerate(matches):
        gt_index[b, :len(sigma)] = sigma
    matched = gt_index >= 0
    safe = np.where(matched, gt_index, 0)
    bi = np.arange(B)[:, None]
    labels = np.where(matched, views.labels[bi, safe], 0)
    boxes = views.boxes[bi, safe]  # (B, N, V, 4)
    vis = views.visible[bi, safe] & matched[..., None]
    return gt_index, matched, labels, boxes, vis


def layout_loss(pred: Predictions, proj: Projected, views: ViewBatch, matches,
                weights: LossWeights, use_completeness: bool = True) -> LossTerms:
    B, N = pred.completeness_logit.shape
    V = views.n_views
    gt_index, matched, labels, gt_boxes, vis = _matched_arrays(matches, views, N)
    n = np.maximum(views.n_objects, 1).astype(np.float64)

    ce = ops.cross_entropy(pred.logits, labels)  # (B, N)
    l_cls = ops.mean(ops.mean(ce, axis=1))

    target_p = (np.arange(N)[None] < views.n_objects[:, None]).astype(np.float64)
    bce = ops.bce_with_logits(pred.completeness_logit, target_p)
    l_p = ops.mean(ops.mean(bce, axis=1))

    inside = np.transpose(proj.center_in_frustum, (0, 2, 1))  # (B, N, V)
    box_views = vis & inside
    frus_views = vis & ~inside
    nb = box_views.sum(axis=-1, keepdims=True)
    nf = frus_views.sum(axis=-1, keepdims=True)
    w_box = np.where(box_views, 1.0 / np.maximum(nb, 1), 0.0) / n[:, None, None]
    w_frus = np.where(frus_views, 1.0 / np.maximum(nf, 1), 0.0) / n[:, None, None]

    pboxes = ops.transpose(proj.boxes, (0, 2, 1, 3))  # (B, N, V, 4)
    l1 = ops.l1_distance(pboxes, gt_boxes)  # (B, N, V)
    l_box = ops.sum(l1 * w_box) * (1.0 / B)

    if frus_views.any():
        bi = np.arange(B)[:, None]
        rays = views.gt_rays()[bi, np.where(matched, gt_index, 0)]  # (B, N, V, 3)
        cc = views.cam_centers[:, None]  # (B, 1, V, 3)
        r_pred = ops.reshape(pred.center, (B, N, 1, 3)) - cc
        cos = ops.sum(r_pred * rays, axis=-1) / (ops.norm(r_pred, axis=-1) * np.linalg.norm(rays, axis=-1))
        # only weighted entries matter; zero weights elsewhere keep values finite
        l_f = ops.sum((1.0 - cos) * w_frus) * (1.0 / B)
    else:
        l_f = Tensor(0.0)

    total = l_cls * weights.cls + l_box * weights.box + l_f * weights.frustum
    if use_completeness:
        total = total + l_p * weights.completeness
    terms = {"cls": l_cls, "box": l_box, "completeness": l_p, "frustum": l_f}
    stats = {
        "box_l1": float((l1.value * box_views).sum() / max(box_views.sum(), 1)),
        "completeness_acc": float(((pred.completeness_logit.value > 0) == (target_p > 0.5)).mean()),
        "box_views": int(box_views.sum()),
        "frustum_views": int(frus_views.sum()),
    }
    return LossTerms(total, terms, stats)


def shape_loss(pred: Predictions, proj: Projected, views: ViewBatch, matches, faces,
               cfg: RasterConfig) -> LossTerms:
    """Gated multi-view silhouette BCE, averaged over objects with a gated view."""
    B, N = pred.completeness_logit.shape
    gt_index, matched, _, _, vis = _matched_arrays(matches, views, N)
    inside = np.transpose(proj.center_in_frustum, (0, 2, 1))
    pairs = np.argwhere(vis & inside)  # rows (b, k, p)
    if not len(pairs) or views.masks is None:
        return LossTerms(Tensor(0.0), stats={"iou": float("nan"), "gated": 0, "pairs": 0})
    b, k, p = pairs.T
    u = proj.u[b, p, k]
    v = proj.v[b, p, k]
    sil = soft_silhouette(u, v, proj.depth.value[b, p, k], faces, cfg)  # (P, H, W)
    gt = views.masks[b, gt_index[b, k], p]
    hard = sil.value > 0.5
    inter = (hard & gt).sum(axis=(1, 2))
    union = (hard | gt).sum(axis=(1, 2))
    iou = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    gate = iou > IOU_GATE
    obj = b * N + k
    contributing = np.unique(obj[gate])
    stats = {"iou": float(iou.mean()), "gated": int(gate.sum()), "pairs": int(len(pairs)),
             "iou_per_pair": iou, "pair_object": obj}
    if not len(contributing):
        return LossTerms(Tensor(0.0), stats=stats)
    per_pixel = ops.bce(sil, gt)
    per_view = ops.mean(per_pixel, axis=(1, 2))  # (P,)
    w = gate / len(contributing)
    loss = ops.sum(per_view * w)
    return LossTerms(loss, {"shape": loss}, stats)


def total_loss(pred: Predictions, proj: Projected, views: ViewBatch, matches,
               weights: LossWeights, stage: int, faces=None, raster: RasterConfig | None = None,
               use_completeness: bool = True) -> LossTerms:
    """Layout loss in stage 1; layout plus weighted shape loss in stage 2."""
    lay = layout_loss(pred, proj, views, matches, weights, use_completeness)
    if stage == 1:
        return lay
    shp = shape_loss(pred, proj, views, matches, faces, raster or RasterConfig())
    total = lay.total + shp.total * weights.shape
    terms = dict(lay.terms, shape=shp.total)
    stats = dict(lay.stats, **{f"shape_{k}": v for k, v in shp.stats.items()})
    return LossTerms(total, terms, stats)
