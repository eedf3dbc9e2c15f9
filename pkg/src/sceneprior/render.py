"""Soft silhouette rasterisation, hard instance-ID rendering and mask I/O.

Soft occupancy of pixel q over its K nearest (by depth) candidate faces::

    occ(q) = 1 - prod_i (1 - sigmoid(delta_i(q) / blend_sigma))

where delta_i is the squared distance from q to triangle i's screen outline,
positive inside and negative outside, measured in normalised image units.
Faces with delta_i <= -blur_radius do not touch q.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import special

from .autodiff import Tensor, as_tensor
from .autodiff.tensor import record
from .geometry import Z_NEAR, Camera, project_np

log = logging.getLogger(__name__)

_AREA_EPS = 1e-14


@dataclass(frozen=True)
class RasterConfig:
    width: int = 64
    height: int = 64
    faces_per_pixel: int = 8
    blur_radius: float = 1e-4
    blend_sigma: float = 1e-4

    def __post_init__(self):
        if self.faces_per_pixel < 1:
            raise ValueError("faces_per_pixel must be >= 1")
        if self.blur_radius <= 0 or self.blend_sigma <= 0:
            raise ValueError("blur_radius and blend_sigma must be positive")


FULL_SCALE_RASTER = RasterConfig(120, 90, faces_per_pixel=50)


def _pixel_pairs(x0, x1, y0, y1, W, H):
    """Enumerate (face, pixel) pairs whose pixel centre lies in each face's box."""
    c0 = np.clip(np.ceil(x0 * W - 0.5), 0, W).astype(np.int64)
    c1 = np.clip(np.floor(x1 * W - 0.5), -1, W - 1).astype(np.int64)
    r0 = np.clip(np.ceil(y0 * H - 0.5), 0, H).astype(np.int64)
    r1 = np.clip(np.floor(y1 * H - 0.5), -1, H - 1).astype(np.int64)
    nc = np.maximum(c1 - c0 + 1, 0)
    nr = np.maximum(r1 - r0 + 1, 0)
    cnt = nc * nr
    face = np.repeat(np.arange(len(cnt)), cnt)
    start = np.repeat(np.cumsum(cnt) - cnt, cnt)
    local = np.arange(cnt.sum()) - start
    ncf = nc[face]
    col = c0[face] + local % np.maximum(ncf, 1)
    row = r0[face] + local // np.maximum(ncf, 1)
    return face, row, col


def _segment_sqdist(qx, qy, ax, ay, bx, by):
    ex, ey = bx - ax, by - ay
    den = ex * ex + ey * ey
    t = np.clip(((qx - ax) * ex + (qy - ay) * ey) / np.where(den > 0, den, 1.0), 0.0, 1.0)
    dx = qx - (ax + t * ex)
    dy = qy - (ay + t * ey)
    return dx * dx + dy * dy, t, dx, dy


class _SoftRaster:
    """Forward state of one soft-silhouette evaluation (kept for the backward)."""

    def __init__(self, u, v, z, faces, cfg: RasterConfig):
        P, V = u.shape
        W, H = cfg.width, cfg.height
        self.shape = (P, V)
        ia, ib, ic = faces[:, 0], faces[:, 1], faces[:, 2]
        ax, ay = u[:, ia], v[:, ia]
        bx, by = u[:, ib], v[:, ib]
        cx, cy = u[:, ic], v[:, ic]
        area2 = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
        front = (z[:, ia] > Z_NEAR) & (z[:, ib] > Z_NEAR) & (z[:, ic] > Z_NEAR)
        degenerate = front & (np.abs(area2) <= _AREA_EPS)
        self.n_degenerate = int(degenerate.sum())
        if self.n_degenerate:
            log.debug("skipped %d zero-area screen triangles", self.n_degenerate)
        ok = front & ~degenerate
        mesh_id, face_id = np.nonzero(ok)
        r = np.sqrt(cfg.blur_radius)
        gx = np.stack([ax, bx, cx])[:, mesh_id, face_id]
        gy = np.stack([ay, by, cy])[:, mesh_id, face_id]
        k, row, col = _pixel_pairs(gx.min(0) - r, gx.max(0) + r, gy.min(0) - r, gy.max(0) + r, W, H)
        m, f = mesh_id[k], face_id[k]
        qx = (col + 0.5) / W
        qy = (row + 0.5) / H
        vid = faces[f]  # (n, 3)
        px = u[m[:, None], vid]
        py = v[m[:, None], vid]
        # edge functions; inside iff all share the sign of the triangle's area
        sgn = np.sign(area2[m, f])
        e = []
        dist = []
        for i in range(3):
            j = (i + 1) % 3
            e.append(((px[:, j] - px[:, i]) * (qy - py[:, i]) - (py[:, j] - py[:, i]) * (qx - px[:, i])) * sgn)
            dist.append(_segment_sqdist(qx, qy, px[:, i], py[:, i], px[:, j], py[:, j]))
        inside = (e[0] >= 0) & (e[1] >= 0) & (e[2] >= 0)
        d2 = np.stack([d[0] for d in dist], axis=1)
        edge = np.argmin(d2, axis=1)
        dmin = d2[np.arange(len(edge)), edge]
        delta = np.where(inside, dmin, -dmin)
        near = delta > -cfg.blur_radius
        pix = (m * H + row) * W + col
        depth = z[m[:, None], vid].mean(axis=1)
        sel = np.nonzero(near)[0]
        # keep the K nearest faces (by mean depth) at every pixel
        order = sel[np.lexsort((depth[sel], pix[sel]))]
        p_sorted = pix[order]
        first = np.r_[True, p_sorted[1:] != p_sorted[:-1]]
        grp_start = np.maximum.accumulate(np.where(first, np.arange(len(order)), 0))
        keep = order[(np.arange(len(order)) - grp_start) < cfg.faces_per_pixel]
        keep.sort()
        self.pix = pix[keep]
        x = delta[keep] / cfg.blend_sigma
        self.x = x
        self.sig = special.expit(x)
        logsurv = np.bincount(self.pix, weights=-np.logaddexp(0.0, x), minlength=P * H * W)
        self.survive = np.exp(logsurv)
        self.occ = (1.0 - self.survive).reshape(P, H, W)
        e_idx = edge[keep]
        self.m = m[keep]
        self.sign = np.where(inside[keep], 1.0, -1.0)
        self.t = np.stack([d[1] for d in dist], axis=1)[keep, e_idx]
        self.dx = np.stack([d[2] for d in dist], axis=1)[keep, e_idx]
        self.dy = np.stack([d[3] for d in dist], axis=1)[keep, e_idx]
        self.v0 = vid[keep, e_idx]
        self.v1 = vid[keep, (e_idx + 1) % 3]
        self.blend_sigma = cfg.blend_sigma
        t = self.t
        # which smooth piece we are on: active pairs, nearest edge, side, clamping
        self.piece = np.concatenate([self.m, f[keep], self.pix, e_idx, self.sign,
                                     (t <= 0.0) * 1.0 - (t >= 1.0) * 1.0])

    def vjp(self, g: np.ndarray):
        P, V = self.shape
        gp = g.reshape(-1)[self.pix]
        # d occ / d delta = survive * sigmoid(x) / sigma
        gdelta = gp * self.survive[self.pix] * self.sig / self.blend_sigma * self.sign
        # d |q - (A + t(B - A))|^2 / dA = -2 (1 - t) diff, / dB = -2 t diff
        w0 = -2.0 * (1.0 - self.t) * gdelta
        w1 = -2.0 * self.t * gdelta
        base0 = self.m * V + self.v0
        base1 = self.m * V + self.v1
        n = P * V
        gu = np.bincount(base0, weights=w0 * self.dx, minlength=n) + np.bincount(base1, weights=w1 * self.dx, minlength=n)
        gv = np.bincount(base0, weights=w0 * self.dy, minlength=n) + np.bincount(base1, weights=w1 * self.dy, minlength=n)
        return gu.reshape(P, V), gv.reshape(P, V)


def soft_silhouette(u, v, depth, faces, cfg: RasterConfig) -> Tensor:
    """Differentiable occupancy maps (P, H, W) for P meshes sharing ``faces``.

    ``u``, ``v`` are normalised screen coordinates (P, V) (tensors or arrays);
    ``depth`` is the camera-frame depth (P, V), used only for face selection.
    """
    u, v = as_tensor(u), as_tensor(v)
    squeeze = u.ndim == 1
    uv_, vv_ = u.value, v.value
    z = np.asarray(depth, dtype=np.float64)
    if squeeze:
        uv_, vv_, z = uv_[None], vv_[None], z[None]
    state = _SoftRaster(uv_, vv_, z, np.asarray(faces), cfg)
    out = state.occ[0] if squeeze else state.occ

    def vjp(g):
        gu, gv = state.vjp(g[None] if squeeze else g)
        return (gu[0], gv[0]) if squeeze else (gu, gv)

    return record("soft_silhouette", out, (u, v), vjp)


def smooth_piece(u, v, depth, faces, cfg: RasterConfig) -> np.ndarray:
    """Fingerprint of the smooth region the occupancy is evaluated on.

    Occupancy is smooth between changes of this fingerprint; it jumps when a
    face enters or leaves the blur band or the K nearest set.
    """
    u = np.atleast_2d(np.asarray(getattr(u, "value", u), dtype=np.float64))
    v = np.atleast_2d(np.asarray(getattr(v, "value", v), dtype=np.float64))
    z = np.atleast_2d(np.asarray(depth, dtype=np.float64))
    return _SoftRaster(u, v, z, np.asarray(faces), cfg).piece


def rasterize_silhouette(world_vertices, faces, cam: Camera, cfg: RasterConfig) -> Tensor:
    """Soft silhouette of one world-space mesh; differentiable in the vertices."""
    from .geometry import project

    u, v, z, _ = project(world_vertices, cam)
    return soft_silhouette(u, v, z.value, faces, cfg)


# ------------------------------------------------------------------ hard rendering

def rasterize_instance_ids(meshes, cam: Camera, cfg: RasterConfig) -> np.ndarray:
    """Hard z-buffer: each pixel gets the index of the mesh owning the nearest
    covering face, or -1 for background. ``meshes`` is a list of
    (world_vertices, faces) pairs.
    """
    W, H = cfg.width, cfg.height
    ids = np.full(H * W, -1, dtype=np.int64)
    best = np.full(H * W, np.inf)
    for obj, (verts, faces) in enumerate(meshes):
        faces = np.asarray(faces)
        u, v, z = project_np(verts, cam)
        tri_z = z[faces]
        ok = (tri_z > Z_NEAR).all(axis=1)
        f = faces[ok]
        if not len(f):
            continue
        tu, tv, tz = u[f], v[f], z[f]
        area2 = (tu[:, 1] - tu[:, 0]) * (tv[:, 2] - tv[:, 0]) - (tv[:, 1] - tv[:, 0]) * (tu[:, 2] - tu[:, 0])
        nz = np.abs(area2) > _AREA_EPS
        tu, tv, tz, area2 = tu[nz], tv[nz], tz[nz], area2[nz]
        k, row, col = _pixel_pairs(tu.min(1), tu.max(1), tv.min(1), tv.max(1), W, H)
        qx = (col + 0.5) / W
        qy = (row + 0.5) / H
        bary = []
        for i in range(3):
            a, b = (i + 1) % 3, (i + 2) % 3
            bary.append(((tu[k, b] - tu[k, a]) * (qy - tv[k, a]) - (tv[k, b] - tv[k, a]) * (qx - tu[k, a])) / area2[k])
        bary = np.stack(bary, axis=1)
        inside = (bary >= 0).all(axis=1)
        # perspective-correct depth: 1/z is affine in screen space
        inv_z = (bary / tz[k]).sum(axis=1)
        zq = 1.0 / inv_z
        pix = row * W + col
        pix, zq = pix[inside], zq[inside]
        order = np.lexsort((zq, pix))
        pix, zq = pix[order], zq[order]
        first = np.r_[True, pix[1:] != pix[:-1]]
        pix, zq = pix[first], zq[first]
        closer = zq < best[pix]
        best[pix[closer]] = zq[closer]
        ids[pix[closer]] = obj
    return ids.reshape(H, W)


def mask_iou(a, b) -> float:
    """IoU of two masks; soft maps are thresholded at 0.5. Two empty masks give 0."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a > 0.5 if a.dtype != bool else a
    b = b > 0.5 if b.dtype != bool else b
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


# ------------------------------------------------------------------ PGM masks

def write_pgm(path, mask, plain: bool = False) -> None:
    """Binary P5 (or plain P2 text) greyscale image, maxval 255."""
    img = np.asarray(mask)
    if img.dtype == bool:
        img = img.astype(np.uint8) * 255
    elif img.dtype != np.uint8:
        img = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    H, W = img.shape
    if plain:
        body = "\n".join(" ".join(str(x) for x in r) for r in img.tolist())
        Path(path).write_text(f"P2\n{W} {H}\n255\n{body}\n")
    else:
        Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Greyscale image as uint8 (H, W)."""
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode())
        pos = end
    magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    if magic == "P5":
        pos += 1
        return np.frombuffer(data[pos:pos + W * H], dtype=np.uint8).reshape(H, W).copy()
    if magic == "P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)
        return vals[: W * H].astype(np.uint8).reshape(H, W)
    raise ValueError(f"not a PGM file (magic {magic!r})")


def read_mask(path) -> np.ndarray:
    return read_pgm(path) >= 128
