"""Pinhole cameras, projection, 2D boxes and the frustum-ray construction.

Camera frame: x right, y down, z forward (points in front have z > 0).
Image coordinates are normalised by width/height, so the visible image is
[0, 1]^2 with (0, 0) the upper-left corner.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, ops

Z_NEAR = 0.01
BOX_MIN_WIDTH = 1e-4


class NoValidProjectionError(ValueError):
    """All points are behind the near plane; the frustum-loss path applies."""


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # world -> camera translation

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("R must be a proper rotation")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.t

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "R": self.R.reshape(-1).tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.array(d["R"]), np.array(d["t"]))


def look_at(eye, target, width: int, height: int, fov_deg: float = 60.0, up=(0.0, 1.0, 0.0)) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(f, f, width / 2.0, height / 2.0, width, height, R, -R @ eye)


def save_camera(path, cam: Camera) -> None:
    Path(path).write_text(json.dumps(cam.to_dict()))


def load_camera(path) -> Camera:
    return Camera.from_dict(json.loads(Path(path).read_text()))


# ------------------------------------------------------------------ projection

def project(points, cam: Camera):
    """Project world points (..., 3) with one camera.

    Returns ``(u, v, depth, valid)``: normalised image coordinates and camera
    depth as tensors, plus a boolean array flagging points beyond the near
    plane.
    """
    u, v, z = project_batch(points, cam.R, cam.t, cam.intrinsics, (cam.width, cam.height))
    return u, v, z, z.value > Z_NEAR


def project_batch(points, R, t, intr, image_size):
    """Project with broadcasting over camera stacks.

    ``points`` (..., P, 3) world; ``R`` (..., 3, 3); ``t`` (..., 3);
    ``intr`` (..., 4) as (fx, fy, cx, cy). Batch dims broadcast numpy-style.
    """
    points = as_tensor(points)
    R = np.asarray(R)
    t = np.asarray(t)
    intr = np.asarray(intr)
    W, H = image_size
    cam = ops.matmul(points, np.swapaxes(R, -1, -2)) + t[..., None, :]
    X, Y, Z = cam[..., 0], cam[..., 1], cam[..., 2]
    fx, fy, cx, cy = (intr[..., i:i + 1] for i in range(4))
    u = (X / Z * fx + cx) * (1.0 / W)
    v = (Y / Z * fy + cy) * (1.0 / H)
    return u, v, Z


def project_np(points, cam: Camera):
    X = np.asarray(points, dtype=np.float64) @ cam.R.T + cam.t
    Z = X[..., 2]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        u = (cam.fx * X[..., 0] / Z + cam.cx) / cam.width
        v = (cam.fy * X[..., 1] / Z + cam.cy) / cam.height
    return u, v, Z


def unproject(u, v, depth, cam: Camera) -> np.ndarray:
    """World point at camera depth ``depth`` behind normalised pixel (u, v)."""
    x = (np.asarray(u) * cam.width - cam.cx) / cam.fx
    y = (np.asarray(v) * cam.height - cam.cy) / cam.fy
    Xc = np.stack([x * depth, y * depth, np.broadcast_to(depth, np.shape(x))], axis=-1)
    return (Xc - cam.t) @ cam.R


def in_frustum(point, cam: Camera) -> bool:
    u, v, z = project_np(np.asarray(point, dtype=np.float64).reshape(1, 3), cam)
    return bool(z[0] > Z_NEAR and 0.0 <= u[0] <= 1.0 and 0.0 <= v[0] <= 1.0)


# ------------------------------------------------------------------ boxes

def box_from_projection(u, v, valid) -> Tensor:
    """Axis-aligned 2D box (..., 4) = (x1, y1, x2, y2) over the last axis.

    Invalid points are ignored; boxes narrower than 1e-4 are widened
    symmetrically, then everything is clamped to [0, 1].
    """
    valid = np.asarray(valid, dtype=bool)
    if not np.all(valid.any(axis=-1)):
        raise NoValidProjectionError("no projected point in front of the camera")
    big = 1e9
    x1 = ops.amin(ops.where(valid, u, big), axis=-1)
    y1 = ops.amin(ops.where(valid, v, big), axis=-1)
    x2 = ops.amax(ops.where(valid, u, -big), axis=-1)
    y2 = ops.amax(ops.where(valid, v, -big), axis=-1)
    half = BOX_MIN_WIDTH / 2.0
    degx = (x2.value - x1.value) < BOX_MIN_WIDTH
    degy = (y2.value - y1.value) < BOX_MIN_WIDTH
    if degx.any():
        x1 = ops.where(degx, x1 - half, x1)
        x2 = ops.where(degx, x2 + half, x2)
    if degy.any():
        y1 = ops.where(degy, y1 - half, y1)
        y2 = ops.where(degy, y2 + half, y2)
    return ops.clip(ops.stack([x1, y1, x2, y2], axis=-1), 0.0, 1.0)


def box_np(points, cam: Camera) -> np.ndarray | None:
    """Box of projected world points (numpy); None if nothing is in front."""
    u, v, z = project_np(points, cam)
    ok = z > Z_NEAR
    if not ok.any():
        return None
    with_valid = box_from_projection(Tensor(u), Tensor(v), ok)
    return with_valid.value


# ------------------------------------------------------------------ frustum rays

def gt_ray(box, cam: Camera) -> np.ndarray:
    """World-frame direction from the camera centre through the box centre."""
    box = np.asarray(box, dtype=np.float64)
    uc = 0.5 * (box[..., 0] + box[..., 2])
    vc = 0.5 * (box[..., 1] + box[..., 3])
    P = unproject(uc, vc, 1.0, cam)
    return P - cam.center


def frustum_ray_pair(c_pred, box, cam: Camera):
    """(ray to predicted centre, ray to ground-truth box centre), both world-frame."""
    c_pred = as_tensor(c_pred)
    return c_pred - cam.center, gt_ray(box, cam)


def cosine(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b)
    return ops.sum(a * b, axis=-1) / (ops.norm(a, axis=-1) * ops.norm(b, axis=-1))


def frustum_term(c_pred, box, cam: Camera) -> Tensor:
    """1 - cos(angle between the two rays); lies in [0, 2]."""
    r_pred, r_gt = frustum_ray_pair(c_pred, box, cam)
    return 1.0 - cosine(r_pred, r_gt)
