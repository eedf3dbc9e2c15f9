import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import expit, log_softmax, softmax

from sceneprior.autodiff import Tensor, gradient_check
from sceneprior.decoders import world_vertices
from sceneprior.geometry import look_at
from sceneprior.losses import (INVISIBLE_BOX_PENALTY, LossWeights, Predictions, ViewBatch, assignment_cost,
                               build_cost_matrix, hungarian, layout_loss, match, project_predictions,
                               shape_loss, total_loss)
from sceneprior.model import ScenePrior
from sceneprior.render import RasterConfig, soft_silhouette
from sceneprior.scene import make_icosphere

from conftest import TINY_MODEL

TMPL0 = make_icosphere(0)


def _brute_min(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return _brute_min(cost.T)


# ---------------------------------------------------------------- Hungarian

def test_hungarian_examples():
    np.testing.assert_array_equal(hungarian([[0, 1], [1, 0]]), [0, 1])
    np.testing.assert_array_equal(hungarian([[1, 0], [0, 1]]), [1, 0])
    assert assignment_cost([[1, 0], [0, 1]], hungarian([[1, 0], [0, 1]])) == 0


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_hungarian_matches_brute_force(n, m, seed):
    cost = np.random.default_rng(seed).uniform(-5, 5, (n, m))
    sigma = hungarian(cost)
    matched = sigma[sigma >= 0]
    assert len(matched) == min(n, m)
    assert len(set(matched.tolist())) == len(matched)
    assert assignment_cost(cost, sigma) == pytest.approx(_brute_min(cost), abs=1e-12)


@given(st.integers(1, 6), st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_matching_follows_prediction_reordering(n, seed, r):
    cost = np.random.default_rng(seed).uniform(0, 1, (n + 2, n))
    perm = list(range(n + 2))
    r.shuffle(perm)
    a = assignment_cost(cost, hungarian(cost))
    b = assignment_cost(cost[perm], hungarian(cost[perm]))
    assert abs(a - b) <= 1e-12


# ---------------------------------------------------------------- cost matrix

def test_cost_of_exact_match_is_minus_one():
    box = np.array([[[0.1, 0.2, 0.4, 0.5]]])
    c = build_cost_matrix(np.array([[0, 1.0, 0, 0]]), box, np.ones((1, 1), bool), [1], box,
                          np.ones((1, 1), bool))
    assert c[0, 0] == -1.0


def test_uniform_class_term():
    box = np.zeros((1, 1, 4))
    c = build_cost_matrix(np.full((1, 4), 0.25), box, np.ones((1, 1), bool), [2], box, np.ones((1, 1), bool))
    assert c[0, 0] == -0.25


def _cost_loop(probs, pboxes, pvis, labels, gboxes, gvis, wb):
    K, J = len(probs), len(labels)
    out = np.zeros((K, J))
    for k in range(K):
        for j in range(J):
            ds = []
            for p in range(gboxes.shape[1]):
                if gvis[j, p]:
                    ds.append(np.mean(np.abs(pboxes[k, p] - gboxes[j, p])) if pvis[k, p] else 2.0)
            out[k, j] = -probs[k, labels[j]] + wb * (np.mean(ds) if ds else 0.0)
    return out


def test_cost_matrix_matches_loop_implementation(rng):
    for _ in range(10):
        K = J = 5
        V = 4
        probs = softmax(rng.standard_normal((K, 7)), axis=-1)
        pboxes = rng.uniform(0, 1, (K, V, 4))
        gboxes = rng.uniform(0, 1, (J, V, 4))
        pvis = rng.uniform(size=(K, V)) > 0.3
        gvis = rng.uniform(size=(J, V)) > 0.3
        labels = rng.integers(0, 7, J)
        np.testing.assert_allclose(build_cost_matrix(probs, pboxes, pvis, labels, gboxes, gvis, 5.0),
                                   _cost_loop(probs, pboxes, pvis, labels, gboxes, gvis, 5.0), atol=1e-14)


def test_invisible_penalty_is_the_maximum_box_distance():
    assert INVISIBLE_BOX_PENALTY == 2.0
    # a mean-L1 over coordinates in [0, 1] can never reach it
    assert np.abs(np.zeros(4) - np.ones(4)).mean() <= INVISIBLE_BOX_PENALTY


def test_default_loss_weights():
    w = LossWeights()
    assert (w.cls, w.box, w.completeness, w.frustum, w.shape, w.match_box) == (1, 5, 1, 1, 2, 5)
    assert w.box / w.cls == 5
    with pytest.raises(ValueError):
        LossWeights(box=-1.0)


# ---------------------------------------------------------------- fixtures

CAMS = [look_at([4.0, 2.6, 0.5], [0.0, 0.4, 0.0], 32, 32), look_at([-0.5, 2.6, 4.0], [0.0, 0.4, 0.0], 32, 32)]


def _views(boxes, visible, labels, masks=None, cams=CAMS):
    n, V = visible.shape
    return ViewBatch(np.stack([c.R for c in cams])[None], np.stack([c.t for c in cams])[None],
                     np.stack([c.intrinsics for c in cams])[None], (cams[0].width, cams[0].height),
                     np.asarray(labels)[None], np.array([n]), boxes[None], visible[None],
                     None if masks is None else masks[None])


def _preds(logits, center, size, comp, tmpl=TMPL0, offsets=None):
    N = len(center)
    canon = np.broadcast_to(tmpl.vertices, (N,) + tmpl.vertices.shape).copy()
    if offsets is not None:
        canon = canon + offsets
    lg, c, s, p = (Tensor(np.asarray(a, float)[None], requires_grad=True) for a in (logits, center, size, comp))
    return Predictions(lg, c, s, p, world_vertices(Tensor(canon[None]), s, c))


def _np_box(verts, cam):
    X = verts @ cam.R.T + cam.t
    u = (cam.fx * X[:, 0] / X[:, 2] + cam.cx) / cam.width
    v = (cam.fy * X[:, 1] / X[:, 2] + cam.cy) / cam.height
    return np.clip([u.min(), v.min(), u.max(), v.max()], 0, 1)


def _in_view(c, cam):
    X = cam.R @ c + cam.t
    u = (cam.fx * X[0] / X[2] + cam.cx) / cam.width
    v = (cam.fy * X[1] / X[2] + cam.cy) / cam.height
    return X[2] > 0.01 and 0 <= u <= 1 and 0 <= v <= 1


def test_perfect_predictions_have_zero_layout_loss():
    centers = np.array([[0.5, 0.4, 0.0], [-0.6, 0.3, 0.2]])
    sizes = np.array([[0.8, 0.8, 0.6], [0.5, 0.6, 0.5]])
    labels = np.array([2, 5])
    gt_boxes = np.array([[_np_box(TMPL0.vertices * s / 2 + c, cam) for cam in CAMS]
                         for c, s in zip(centers, sizes)])
    vb = _views(gt_boxes, np.ones((2, 2), bool), labels)
    logits = np.full((2, 7), -60.0)
    logits[[0, 1], labels] = 60.0
    pred = _preds(logits, centers, sizes, [60.0, 60.0])
    proj = project_predictions(pred, vb)
    m = match(pred, proj, vb, LossWeights())
    np.testing.assert_array_equal(m[0], [0, 1])
    out = layout_loss(pred, proj, vb, m, LossWeights())
    assert out.terms["box"].item() == pytest.approx(0.0, abs=1e-14)
    assert out.terms["cls"].item() < 1e-20
    assert out.terms["completeness"].item() < 1e-20
    assert out.terms["frustum"].item() == 0.0


def test_centre_on_rays_with_wrong_boxes():
    # box term is positive, frustum term is zero
    centers = np.array([[0.5, 0.4, 0.0]])
    gt = np.array([[_np_box(TMPL0.vertices * 0.4 + centers[0], cam) for cam in CAMS]])
    vb = _views(gt, np.ones((1, 2), bool), [1])
    pred = _preds(np.zeros((1, 7)), centers, [[2.0, 0.8, 0.3]], [0.0])
    proj = project_predictions(pred, vb)
    out = layout_loss(pred, proj, vb, match(pred, proj, vb, LossWeights()), LossWeights())
    assert out.terms["box"].item() > 0.01
    assert out.terms["frustum"].item() == 0.0


def test_hand_built_two_object_two_view_fixture():
    gt_c = np.array([[0.5, 0.4, 0.0], [-0.6, 0.3, 0.2]])
    gt_s = np.array([[0.8, 0.8, 0.6], [0.5, 0.6, 0.5]])
    labels = np.array([2, 5])
    gt_boxes = np.array([[_np_box(TMPL0.vertices * s / 2 + c, cam) for cam in CAMS] for c, s in zip(gt_c, gt_s)])
    visible = np.array([[True, True], [True, False]])
    vb = _views(gt_boxes, visible, labels)
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 7))
    # prediction 1 sits far off to the side: outside the first camera's frustum
    centers = np.array([[0.45, 0.5, 0.1], [-0.3, 0.6, -6.0], [0.1, 0.4, 0.3]])
    sizes = np.array([[0.7, 0.9, 0.5], [0.4, 0.5, 0.6], [0.3, 0.3, 0.3]])
    comp = np.array([1.5, -0.3, 0.2])
    pred = _preds(logits, centers, sizes, comp)
    proj = project_predictions(pred, vb)
    w = LossWeights()
    m = match(pred, proj, vb, w)
    out = layout_loss(pred, proj, vb, m, w)

    # --- independent recomputation
    verts = [TMPL0.vertices * s / 2 + c for c, s in zip(centers, sizes)]
    pboxes = np.array([[_np_box(v, cam) for cam in CAMS] for v in verts])
    inside = np.array([[_in_view(c, cam) for cam in CAMS] for c in centers])
    probs = softmax(logits, axis=-1)
    cost = _cost_loop(probs[:2], pboxes[:2], inside[:2], labels, gt_boxes, visible, 5.0)
    best = min(itertools.permutations(range(2)), key=lambda p: sum(cost[k, p[k]] for k in range(2)))
    np.testing.assert_array_equal(m[0], best)
    target = np.array([labels[best[0]], labels[best[1]], 0])
    l_cls = np.mean(-log_softmax(logits, axis=-1)[np.arange(3), target])
    t_p = np.array([1.0, 1.0, 0.0])
    l_p = np.mean(-(t_p * np.log(expit(comp)) + (1 - t_p) * np.log(1 - expit(comp))))
    l_box = l_f = 0.0
    n_box = n_frus = 0
    for k in range(2):
        j = best[k]
        bv, fv = [], []
        for p, cam in enumerate(CAMS):
            if not visible[j, p]:
                continue
            if inside[k, p]:
                bv.append(np.mean(np.abs(pboxes[k, p] - gt_boxes[j, p])))
            else:
                b = gt_boxes[j, p]
                d = np.array([((b[0] + b[2]) / 2 * cam.width - cam.cx) / cam.fx,
                              ((b[1] + b[3]) / 2 * cam.height - cam.cy) / cam.fy, 1.0])
                ray = cam.R.T @ d
                r = centers[k] - cam.center
                fv.append(1 - r @ ray / np.linalg.norm(r) / np.linalg.norm(ray))
        n_box += len(bv)
        n_frus += len(fv)
        l_box += np.mean(bv) if bv else 0.0
        l_f += np.mean(fv) if fv else 0.0
    l_box /= 2
    l_f /= 2
    assert n_frus >= 1 and n_box >= 1
    assert out.stats["box_views"] == n_box and out.stats["frustum_views"] == n_frus
    assert out.terms["cls"].item() == pytest.approx(l_cls, rel=1e-12)
    assert out.terms["completeness"].item() == pytest.approx(l_p, rel=1e-12)
    assert out.terms["box"].item() == pytest.approx(l_box, rel=1e-12)
    assert out.terms["frustum"].item() == pytest.approx(l_f, rel=1e-12)
    assert out.total.item() == pytest.approx(l_cls + 5 * l_box + l_p + l_f, rel=1e-12)


# ---------------------------------------------------------------- shape loss

def _single_object_masks(cam, verts, faces, cfg, extra_fraction):
    from sceneprior.geometry import project
    u, v, z, _ = project(verts, cam)
    sil = soft_silhouette(u, v, z.value, faces, cfg).value
    hard = sil > 0.5
    gt = hard.copy()
    # add background pixels until IoU = |hard| / (|hard| + extra) drops to the target
    free = np.argwhere(~hard)
    extra = int(round(hard.sum() * extra_fraction))
    for r, c in free[:extra]:
        gt[r, c] = True
    return sil, hard, gt


def test_shape_gate_blocks_poorly_aligned_views():
    tmpl = make_icosphere(1)
    cfg = RasterConfig(32, 32)
    c, s = np.array([0.0, 0.4, 0.0]), np.array([0.8, 0.8, 0.8])
    verts = tmpl.vertices * s / 2 + c
    masks = []
    for cam in CAMS:
        _, hard, gt = _single_object_masks(cam, verts, tmpl.faces, cfg, 1.5)  # IoU = 0.4
        assert abs(hard.sum() / gt.sum() - 0.4) < 0.01
        masks.append(gt)
    boxes = np.array([[_np_box(verts, cam) for cam in CAMS]])
    vb = _views(boxes, np.ones((1, 2), bool), [1], np.array([masks]))
    pred = _preds(np.zeros((1, 7)), [c], [s], [0.0], tmpl)
    proj = project_predictions(pred, vb)
    out = shape_loss(pred, proj, vb, [np.array([0])], tmpl.faces, cfg)
    assert out.total.item() == 0.0 and out.stats["gated"] == 0 and out.stats["pairs"] == 2


def test_shape_loss_equals_manual_bce_on_tiny_image():
    tmpl = make_icosphere(1)
    cam = look_at([0.0, 0.5, 3.0], [0.0, 0.5, 0.0], 4, 4)
    cfg = RasterConfig(4, 4)
    c, s = np.array([0.0, 0.5, 0.0]), np.array([1.2, 1.2, 1.2])
    verts = tmpl.vertices * s / 2 + c
    sil, hard, _ = _single_object_masks(cam, verts, tmpl.faces, cfg, 0.0)
    gt = hard.copy()
    gt[0, 0] = True  # one disagreeing pixel keeps IoU high but the loss nonzero
    vb = _views(np.array([[_np_box(verts, cam)]]), np.ones((1, 1), bool), [1], np.array([[gt]]), cams=[cam])
    pred = _preds(np.zeros((1, 7)), [c], [s], [0.0], tmpl)
    proj = project_predictions(pred, vb)
    out = shape_loss(pred, proj, vb, [np.array([0])], tmpl.faces, cfg)
    r = np.clip(sil, 1e-6, 1 - 1e-6)
    per_pixel = -(gt * np.log(r) + (~gt) * np.log(1 - r))
    # per-view BCE is the pixel mean, i.e. the per-pixel sum over H * W
    assert out.stats["gated"] == 1
    assert out.total.item() == pytest.approx(per_pixel.sum() / 16, rel=1e-12)


# ---------------------------------------------------------------- total loss

@pytest.fixture(scope="module")
def tiny_model():
    return ScenePrior(TINY_MODEL)


def _record_view(dataset, s=0, n_views=4):
    return dataset.batch([s], [np.arange(n_views)])


def test_stage1_equals_stage2_without_shape_term(tiny_model, tiny_dataset):
    vb = _record_view(tiny_dataset)
    z = tiny_model.latent(np.zeros((1, TINY_MODEL.n_anchors)))
    w0 = LossWeights(shape=0.0)
    p1 = tiny_model.predict(z, stage=1)
    p2 = tiny_model.predict(z, stage=2)  # fresh shape head: zero offsets
    assert p1.vertices.value.tobytes() == p2.vertices.value.tobytes()
    out = []
    for stage, p in ((1, p1), (2, p2)):
        proj = project_predictions(p, vb)
        m = match(p, proj, vb, w0)
        out.append(total_loss(p, proj, vb, m, w0, stage, tiny_model.template.faces, RasterConfig(32, 32)))
    assert out[0].total.item() == out[1].total.item()
    assert "shape" in out[1].terms and "shape" not in out[0].terms


def test_loss_terms_nonnegative_and_views_partitioned(tiny_model, tiny_dataset):
    vb = _record_view(tiny_dataset, s=1)
    for seed in range(4):
        u = np.random.default_rng(seed).standard_normal((1, TINY_MODEL.n_anchors))
        p = tiny_model.predict(tiny_model.latent(u), stage=2)
        proj = project_predictions(p, vb)
        m = match(p, proj, vb, LossWeights())
        out = total_loss(p, proj, vb, m, LossWeights(), 2, tiny_model.template.faces, RasterConfig(32, 32))
        assert np.isfinite(out.total.item())
        assert all(float(np.asarray(getattr(v, "value", v))) >= 0 for v in out.terms.values())
        n = int(vb.n_objects[0])
        assert out.stats["box_views"] + out.stats["frustum_views"] == vb.visible[0, :n].sum()


def test_latent_logit_gradient_on_one_object_fixture(tiny_model, tiny_dataset):
    rec = tiny_dataset.records[0]
    keep = [0]
    vb = ViewBatch(np.stack([c.R for c in rec.cameras])[None], np.stack([c.t for c in rec.cameras])[None],
                   np.stack([c.intrinsics for c in rec.cameras])[None], tiny_dataset.image_size,
                   rec.labels[keep][None], np.array([1]), rec.boxes[keep][None], rec.visible[keep][None],
                   rec.masks[keep][None])
    w = LossWeights()
    u0 = np.random.default_rng(1).standard_normal((1, TINY_MODEL.n_anchors))
    p = tiny_model.predict(tiny_model.latent(u0), stage=1)
    frozen = match(p, project_predictions(p, vb), vb, w)  # the assignment is constant within a step

    def f(u):
        pred = tiny_model.predict(tiny_model.latent(u), stage=1)
        return total_loss(pred, project_predictions(pred, vb), vb, frozen, w, 1).total

    assert gradient_check(f, Tensor(u0)) < 1e-4
