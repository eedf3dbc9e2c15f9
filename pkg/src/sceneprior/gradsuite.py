"""Tape gradients against central differences for every differentiable piece.

Three tiers with their own tolerances: single primitives, composite losses,
and the soft rasteriser (whose blur cutoff makes it only piecewise smooth).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gradient_check, ops
from .decoders import ObjectDecoder
from .geometry import look_at, project
from .latent import compose_latent, init_anchors
from .render import RasterConfig, smooth_piece, soft_silhouette
from .scene import make_icosphere

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4
RENDER_TOL = 1e-3


def _pos(x):
    return ops.abs(x) + 0.5


# name -> (function of x and a fixed random array w, input shape)
PRIMITIVES = {
    "add": (lambda x, w: ops.add(x, w), (3, 4)),
    "sub": (lambda x, w: ops.sub(w, x), (3, 4)),
    "mul": (lambda x, w: ops.mul(x, x), (3, 4)),
    "div": (lambda x, w: ops.div(w, _pos(x)), (3, 4)),
    "neg": (lambda x, w: ops.neg(x), (3, 4)),
    "power": (lambda x, w: ops.power(_pos(x), 2.5), (3, 4)),
    "square": (lambda x, w: ops.square(x), (3, 4)),
    "sqrt": (lambda x, w: ops.sqrt(_pos(x)), (3, 4)),
    "exp": (lambda x, w: ops.exp(x), (3, 4)),
    "log": (lambda x, w: ops.log(_pos(x)), (3, 4)),
    "abs": (lambda x, w: ops.abs(x), (3, 4)),
    "clip": (lambda x, w: ops.clip(x, -0.5, 0.5), (3, 4)),
    "where": (lambda x, w: ops.where(w > 0, x, ops.square(x)), (3, 4)),
    "matmul": (lambda x, w: ops.matmul(x, w.T), (3, 4)),
    "relu": (lambda x, w: ops.relu(x), (3, 4)),
    "sigmoid": (lambda x, w: ops.sigmoid(x), (3, 4)),
    "softplus": (lambda x, w: ops.softplus(x), (3, 4)),
    "gelu": (lambda x, w: ops.gelu(x), (3, 4)),
    "tanh": (lambda x, w: ops.tanh(x), (3, 4)),
    "softmax": (lambda x, w: ops.softmax(x, axis=-1), (3, 4)),
    "log_softmax": (lambda x, w: ops.log_softmax(x, axis=-1), (3, 4)),
    "sum": (lambda x, w: ops.sum(x, axis=0, keepdims=True), (3, 4)),
    "mean": (lambda x, w: ops.mean(x, axis=1, keepdims=True), (3, 4)),
    "amax": (lambda x, w: ops.amax(x, axis=1, keepdims=True), (3, 4)),
    "amin": (lambda x, w: ops.amin(x, axis=0, keepdims=True), (3, 4)),
    "reshape": (lambda x, w: ops.reshape(x, (4, 3)), (3, 4)),
    "transpose": (lambda x, w: ops.transpose(x), (3, 4)),
    "swapaxes": (lambda x, w: ops.swapaxes(x, 0, 1), (3, 4)),
    "broadcast_to": (lambda x, w: ops.broadcast_to(ops.reshape(x, (1, 3, 4)), (2, 3, 4)), (3, 4)),
    "getitem": (lambda x, w: x[np.array([0, 2, 2])], (3, 4)),
    "concat": (lambda x, w: ops.concat([x, ops.square(x)], axis=1), (3, 4)),
    "stack": (lambda x, w: ops.stack([x, ops.exp(x)], axis=0), (3, 4)),
    "linear": (lambda x, w: ops.linear(x, w.T, w[0, :3]), (3, 4)),
    "norm": (lambda x, w: ops.norm(x, axis=-1), (3, 4)),
    "layer_norm": (lambda x, w: ops.layer_norm(x, w[0], w[1]), (3, 4)),
    "l1_distance": (lambda x, w: ops.l1_distance(x, w), (3, 4)),
    "cross_entropy": (lambda x, w: ops.cross_entropy(x, np.array([0, 3, 1])), (3, 4)),
    "bce_with_logits": (lambda x, w: ops.bce_with_logits(x, (w > 0).astype(float)), (3, 4)),
    "bce": (lambda x, w: ops.bce(ops.sigmoid(x), (w > 0).astype(float)), (3, 4)),
}


def _scalarize(out: Tensor, r: np.ndarray) -> Tensor:
    return ops.sum(out * r)


def primitive_errors(points: int = 100, seed: int = 0) -> dict[str, float]:
    """Worst relative error per primitive over ``points`` random inputs."""
    out = {}
    for i, (name, (fn, shape)) in enumerate(PRIMITIVES.items()):
        worst = 0.0
        for k in range(points):
            rng = np.random.default_rng([seed, i, k])
            x = rng.standard_normal(shape)
            w = rng.standard_normal(shape)
            res_shape = fn(Tensor(x), w).shape
            # output weights kept away from zero so FD round-off stays relative
            r = rng.choice([-1.0, 1.0], res_shape) * rng.uniform(0.5, 1.5, res_shape)
            err = gradient_check(lambda t: _scalarize(fn(t, w), r), Tensor(x.copy()))
            worst = max(worst, err)
        out[name] = worst
    return out


def layout_loss_error(seed: int = 0) -> float:
    """Box-L1 + CE + completeness BCE of the layout head, wrt the head weights."""
    rng = np.random.default_rng(seed)
    dec = ObjectDecoder(16, 5, rng, trunk=(24, 12), shape_hidden=(8,))
    x = rng.standard_normal((2, 3, 16))
    labels = rng.integers(0, 5, (2, 3))
    target_c = rng.uniform(0.2, 2.0, (2, 3, 3))
    target_s = rng.uniform(0.5, 1.5, (2, 3, 3))
    done = (rng.uniform(size=(2, 3)) > 0.5).astype(float)

    def loss(w):
        dec.head.weight = w
        lay = dec.layout(dec.features(x))
        return (ops.mean(ops.cross_entropy(lay.logits, labels))
                + ops.mean(ops.l1_distance(lay.center, target_c))
                + ops.mean(ops.l1_distance(lay.size, target_s))
                + ops.mean(ops.bce_with_logits(lay.completeness_logit, done)))

    w0 = dec.head.weight.value.copy()
    return gradient_check(loss, Tensor(w0))


def softmax_ce_error(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((6, 7)) * 2.0
    target = rng.integers(0, 7, 6)
    return gradient_check(lambda t: ops.mean(ops.cross_entropy(t, target)), Tensor(logits))


def latent_error(seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    anchors = init_anchors(32, 8, seed=seed)
    target = rng.standard_normal(8)
    return gradient_check(lambda u: ops.sum(ops.square(compose_latent(anchors, u) - target)),
                          Tensor(rng.standard_normal(32)))


def silhouette_error(seed: int = 3, coords: int = 12, eps: float = 1e-4) -> tuple[float, int]:
    """Summed soft occupancy of a small sphere wrt single vertex coordinates.

    Occupancy is only piecewise smooth: it jumps when a face enters or leaves
    a pixel's blur band. A central difference straddling such a jump measures
    the jump, not the derivative, so coordinates whose +-eps probes land on a
    different smooth piece are skipped (and counted) until ``coords`` clean
    ones have been checked. Returns (worst error, skipped count).
    """
    rng = np.random.default_rng(seed)
    tmpl = make_icosphere(1)
    cam = look_at([0.3, 0.4, 3.0], [0.0, 0.0, 0.0], 32, 32, fov_deg=50.0)
    cfg = RasterConfig(32, 32, faces_per_pixel=8, blur_radius=1e-4, blend_sigma=1e-4)
    base = tmpl.vertices * rng.uniform(0.8, 1.2, 3)

    def piece(verts):
        u, v, z, _ = project(verts, cam)
        return smooth_piece(u.value, v.value, z.value, tmpl.faces, cfg)

    worst, checked, skipped = 0.0, 0, 0
    for p in rng.permutation(base.size):
        if checked == coords:
            break
        lo, hi = base.copy(), base.copy()
        lo.reshape(-1)[p] -= eps
        hi.reshape(-1)[p] += eps
        ref = piece(base)
        if not (np.array_equal(piece(lo), ref) and np.array_equal(piece(hi), ref)):
            skipped += 1
            continue
        mask = np.zeros(base.size)
        mask[p] = 1.0

        def f(c, p=p, mask=mask):
            shift = ops.reshape(c - base.reshape(-1)[p], (1,)) * mask
            verts = ops.reshape(ops.add(shift, base.reshape(-1)), base.shape)
            u, v, z, _ = project(verts, cam)
            return ops.sum(soft_silhouette(u, v, z.value, tmpl.faces, cfg))

        worst = max(worst, gradient_check(f, Tensor(np.array([base.reshape(-1)[p]])), eps=eps))
        checked += 1
    return worst, skipped


@dataclass
class SuiteResult:
    name: str
    error: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.error < self.tol


def run_suite(points: int = 100, seed: int = 0) -> list[SuiteResult]:
    out = [SuiteResult(f"primitive.{k}", v, PRIMITIVE_TOL) for k, v in primitive_errors(points, seed).items()]
    out.append(SuiteResult("composite.softmax_cross_entropy", softmax_ce_error(seed), 1e-6))
    out.append(SuiteResult("composite.layout_loss", layout_loss_error(seed), 1e-5))
    out.append(SuiteResult("composite.latent", latent_error(seed), 1e-6))
    err, _ = silhouette_error()
    out.append(SuiteResult("render.soft_silhouette", err, RENDER_TOL))
    return out
