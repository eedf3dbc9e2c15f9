"""Procedural toy scenes with multi-view instance masks.

Scenes are rooms of non-overlapping furniture drawn from simple shape
families. Each scene is observed by a ring of cameras; ground-truth masks
come from the hard z-buffer, boxes from projected mesh vertices.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Camera, box_np, look_at
from .losses import ViewBatch
from .render import RasterConfig, rasterize_instance_ids, read_mask, write_pgm
from .scene import (
    TOY_CATEGORIES,
    CategoryTable,
    Mesh,
    ObjectInstance,
    Scene,
    make_icosphere,
    read_scene,
    write_scene,
)

MANIFEST = "manifest.json"
REJECTION_BUDGET = 1000


class DatasetError(RuntimeError):
    pass


# ------------------------------------------------------------------ shape families

def box_mesh(taper: float = 1.0) -> Mesh:
    """Closed box in [-1, 1]^3; ``taper`` < 1 shrinks the top face in x and z."""
    v = []
    for y in (-1.0, 1.0):
        s = taper if y > 0 else 1.0
        v += [[-s, y, -s], [s, y, -s], [s, y, s], [-s, y, s]]
    f = [[0, 1, 2], [0, 2, 3], [4, 6, 5], [4, 7, 6],
         [0, 4, 5], [0, 5, 1], [1, 5, 6], [1, 6, 2],
         [2, 6, 7], [2, 7, 3], [3, 7, 4], [3, 4, 0]]
    return Mesh(np.array(v, dtype=np.float64), np.array(f, dtype=np.int64))


def ellipsoid_mesh(level: int = 2) -> Mesh:
    t = make_icosphere(level)
    return Mesh(t.vertices.copy(), t.faces.copy())


def l_shape_mesh(seat: float = 0.0, back: float = 0.4) -> Mesh:
    """Chair-like L prism: a low block over the full depth plus a back slab.

    Cross-section in the (z, y) plane, extruded along x over [-1, 1].
    """
    zb = 1.0 - 2.0 * back  # back slab occupies z in [zb, 1]
    poly = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [zb, 1.0], [zb, seat], [-1.0, seat]])
    tris = [[0, 1, 4], [0, 4, 5], [1, 2, 3], [1, 3, 4]]
    v = [[x, y, z] for x in (-1.0, 1.0) for z, y in poly]
    n = len(poly)
    f = []
    for a, b, c in tris:
        f.append([a, c, b])  # x = -1 cap faces -x
        f.append([n + a, n + b, n + c])
    for i in range(n):
        j = (i + 1) % n
        f += [[i, j, n + j], [i, n + j, n + i]]
    mesh = Mesh(np.array(v, dtype=np.float64), np.array(f, dtype=np.int64))
    return _orient_outward(mesh)


def _orient_outward(mesh: Mesh) -> Mesh:
    # signed volume > 0 means counter-clockwise (outward) winding
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    vol = np.einsum("ij,ij->i", a, np.cross(b, c)).sum()
    faces = mesh.faces if vol > 0 else mesh.faces[:, ::-1].copy()
    return Mesh(mesh.vertices, faces)


SHAPE_FAMILIES = {
    "box": box_mesh,
    "tapered": lambda: box_mesh(0.6),
    "ellipsoid": ellipsoid_mesh,
    "lshape": l_shape_mesh,
}

# category -> (shape family, mean size (x, y, z) in metres, relative jitter)
CATEGORY_PRIORS = {
    "bed": ("box", (1.5, 0.55, 1.9), 0.1),
    "wardrobe": ("box", (1.1, 1.9, 0.6), 0.1),
    "nightstand": ("tapered", (0.6, 0.6, 0.5), 0.1),
    "chair": ("lshape", (0.6, 1.0, 0.6), 0.1),
    "table": ("tapered", (1.2, 0.75, 0.8), 0.1),
    "lamp": ("ellipsoid", (0.5, 0.8, 0.5), 0.1),
}


def retrieval_library(categories: CategoryTable = TOY_CATEGORIES) -> dict:
    """Procedural CAD stand-ins: every family is available for every category."""
    shelf = {name: SHAPE_FAMILIES[name]() for name in SHAPE_FAMILIES}
    return {c: dict(shelf) for c in categories.names[1:]}


# ------------------------------------------------------------------ dataset spec

@dataclass(frozen=True)
class DatasetSpec:
    n_scenes: int = 8
    min_objects: int = 2
    max_objects: int = 5
    n_views: int = 16
    room_half_extent: float = 1.8
    ring_radius: float = 4.2
    ring_height: float = 2.6
    fov_deg: float = 60.0
    image_size: tuple = (64, 64)
    seed: int = 0
    categories: tuple = TOY_CATEGORIES.names

    def __post_init__(self):
        object.__setattr__(self, "image_size", tuple(self.image_size))
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.n_views < 4:
            raise ValueError("need at least 4 views per scene")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("object count range is empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_size"] = list(self.image_size)
        d["categories"] = list(self.categories)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


def _boxes_overlap(a: ObjectInstance, b: ObjectInstance) -> bool:
    lo_a, hi_a = a.box_bounds()
    lo_b, hi_b = b.box_bounds()
    return bool(np.all(np.minimum(hi_a, hi_b) - np.maximum(lo_a, lo_b) > 0))


def ring_cameras(spec: DatasetSpec, target) -> list[Camera]:
    W, H = spec.image_size
    cams = []
    for i in range(spec.n_views):
        a = 2.0 * np.pi * i / spec.n_views
        eye = [target[0] + spec.ring_radius * np.cos(a), spec.ring_height,
               target[2] + spec.ring_radius * np.sin(a)]
        cams.append(look_at(eye, target, W, H, spec.fov_deg))
    return cams


def _sample_scene(spec: DatasetSpec, rng, cats: CategoryTable) -> Scene:
    n = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    objs: list[ObjectInstance] = []
    for _ in range(n):
        for _ in range(REJECTION_BUDGET):
            name = cats.names[int(rng.integers(1, len(cats)))]
            family, mean, jitter = CATEGORY_PRIORS[name]
            size = np.array(mean) * (1.0 + jitter * rng.uniform(-1, 1, 3))
            lim = spec.room_half_extent - size[[0, 2]] / 2
            if np.any(lim <= 0):
                continue
            cx, cz = rng.uniform(-lim, lim)
            obj = ObjectInstance(cats.index(name), [cx, size[1] / 2, cz], size, SHAPE_FAMILIES[family]())
            if not any(_boxes_overlap(obj, o) for o in objs):
                objs.append(obj)
                break
        else:
            raise DatasetError("rejection budget exceeded; use fewer or smaller objects")
    return Scene(objs, cats)


def render_views(scene: Scene, cams: list[Camera], image_size) -> list[dict]:
    """Per view: instance-id map, and per object its mask and projected box."""
    W, H = image_size
    cfg = RasterConfig(W, H)
    meshes = [(o.world_vertices(), o.mesh.faces) for o in scene.objects]
    out = []
    for cam in cams:
        ids = rasterize_instance_ids(meshes, cam, cfg)
        objs = []
        for j, (verts, _) in enumerate(meshes):
            mask = ids == j
            box = box_np(verts, cam) if mask.any() else None
            objs.append({"mask": mask, "box": box})
        out.append({"ids": ids, "objects": objs})
    return out


def generate_dataset(spec: DatasetSpec, out_dir) -> dict:
    """Write scenes, cameras, masks and the manifest; deterministic in ``spec.seed``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cats = CategoryTable(spec.categories)
    scenes = []
    for s in range(spec.n_scenes):
        rng = np.random.default_rng([spec.seed, s])
        for _ in range(REJECTION_BUDGET):
            scene = _sample_scene(spec, rng, cats)
            centroid = np.mean([o.center for o in scene.objects], axis=0)
            target = [centroid[0], 0.4, centroid[2]]
            cams = ring_cameras(spec, target)
            views = render_views(scene, cams, spec.image_size)
            seen = np.array([[v["objects"][j]["mask"].any() for v in views] for j in range(len(scene))])
            if np.all(seen.sum(axis=1) >= 2):
                break
        else:
            raise DatasetError(f"scene {s}: could not place objects visible in >= 2 views")
        sid = f"scene_{s:03d}"
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        write_scene(sdir / "scene.json", scene)
        vrecs = []
        for p, (cam, view) in enumerate(zip(cams, views)):
            cam_file = f"{sid}/cam_{p:02d}.json"
            (out / cam_file).write_text(json.dumps(cam.to_dict()))
            objs = []
            for j, ob in enumerate(view["objects"]):
                if ob["box"] is None or not ob["mask"].any():
                    continue
                mask_file = f"{sid}/mask_{p:02d}_{j:02d}.pgm"
                write_pgm(out / mask_file, ob["mask"])
                objs.append({"track": j, "label": int(scene.objects[j].label),
                             "box": [float(x) for x in ob["box"]], "mask": mask_file})
            vrecs.append({"camera": cam_file, "objects": objs})
        scenes.append({"id": sid, "scene": f"{sid}/scene.json", "n_objects": len(scene),
                       "labels": [int(o.label) for o in scene.objects], "views": vrecs})
    manifest = {"spec": spec.to_dict(), "categories": list(cats.names),
                "image_size": list(spec.image_size), "scenes": scenes}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return manifest


# ------------------------------------------------------------------ loading

@dataclass
class SceneRecord:
    """One training scene in array form; views indexed along axis ``T``."""

    scene_id: str
    labels: np.ndarray  # (n,)
    cameras: list
    boxes: np.ndarray  # (n, T, 4)
    visible: np.ndarray  # (n, T)
    masks: np.ndarray  # (n, T, H, W) bool
    scene: Scene | None = None

    @property
    def n_objects(self) -> int:
        return len(self.labels)

    @property
    def n_views(self) -> int:
        return len(self.cameras)

    def rotated(self, quarter_turns: int) -> "SceneRecord":
        """Same observations of the scene turned by 90 degrees about the up axis.

        Rotating the world by Q while keeping the images fixed means each
        camera's world->camera rotation becomes R Q^T.
        """
        a = np.pi / 2 * quarter_turns
        c, s = np.round(np.cos(a)), np.round(np.sin(a))
        Q = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
        cams = [Camera(k.fx, k.fy, k.cx, k.cy, k.width, k.height, k.R @ Q.T, k.t) for k in self.cameras]
        scene = None
        if self.scene is not None:
            objs = []
            for o in self.scene.objects:
                size = np.abs(Q) @ o.size
                mesh = Mesh(o.mesh.vertices @ Q.T, o.mesh.faces) if o.mesh is not None else None
                objs.append(ObjectInstance(o.label, Q @ o.center, size, mesh))
            scene = Scene(objs, self.scene.categories)
        return SceneRecord(f"{self.scene_id}_r{quarter_turns * 90}", self.labels, cams,
                           self.boxes, self.visible, self.masks, scene)


@dataclass
class Dataset:
    records: list = field(default_factory=list)
    categories: CategoryTable = TOY_CATEGORIES
    image_size: tuple = (64, 64)

    def __len__(self):
        return len(self.records)

    def augmented(self) -> "Dataset":
        """Every scene plus its 90/180/270 degree yaw rotations."""
        recs = [r.rotated(q) if q else r for r in self.records for q in range(4)]
        return Dataset(recs, self.categories, self.image_size)

    def category_histogram(self) -> np.ndarray:
        h = np.zeros(len(self.categories))
        for r in self.records:
            np.add.at(h, r.labels, 1)
        return h

    def batch(self, indices, view_indices) -> ViewBatch:
        """Stack scenes ``indices`` with per-scene view index lists ``view_indices``."""
        recs = [self.records[i] for i in indices]
        B = len(recs)
        V = len(view_indices[0])
        n_pad = max(max(r.n_objects for r in recs), 1)
        W, H = self.image_size
        R = np.zeros((B, V, 3, 3))
        t = np.zeros((B, V, 3))
        intr = np.zeros((B, V, 4))
        labels = np.zeros((B, n_pad), dtype=np.int64)
        boxes = np.zeros((B, n_pad, V, 4))
        visible = np.zeros((B, n_pad, V), dtype=bool)
        masks = np.zeros((B, n_pad, V, H, W), dtype=bool)
        n = np.zeros(B, dtype=np.int64)
        for b, (r, vi) in enumerate(zip(recs, view_indices)):
            vi = np.asarray(vi)
            for p, idx in enumerate(vi):
                cam = r.cameras[idx]
                R[b, p], t[b, p], intr[b, p] = cam.R, cam.t, cam.intrinsics
            k = r.n_objects
            n[b] = k
            labels[b, :k] = r.labels
            boxes[b, :k] = r.boxes[:, vi]
            visible[b, :k] = r.visible[:, vi]
            masks[b, :k] = r.masks[:, vi]
        return ViewBatch(R, t, intr, (W, H), labels, n, boxes, visible, masks)


def load_dataset(root) -> Dataset:
    root = Path(root)
    man = json.loads((root / MANIFEST).read_text())
    cats = CategoryTable(tuple(man["categories"]))
    W, H = man["image_size"]
    recs = []
    for s in man["scenes"]:
        n = s["n_objects"]
        T = len(s["views"])
        cams = []
        boxes = np.zeros((n, T, 4))
        visible = np.zeros((n, T), dtype=bool)
        masks = np.zeros((n, T, H, W), dtype=bool)
        for p, v in enumerate(s["views"]):
            cams.append(Camera.from_dict(json.loads((root / v["camera"]).read_text())))
            for ob in v["objects"]:
                j = ob["track"]
                boxes[j, p] = ob["box"]
                visible[j, p] = True
                masks[j, p] = read_mask(root / ob["mask"])
        scene = read_scene(root / s["scene"]) if s.get("scene") else None
        recs.append(SceneRecord(s["id"], np.array(s["labels"], dtype=np.int64), cams,
                                boxes, visible, masks, scene))
    return Dataset(recs, cats, (W, H))


def single_view_batch(record: SceneRecord, view: int) -> ViewBatch:
    """Supervision restricted to one view and the objects visible in it."""
    vis = record.visible[:, view]
    keep = np.nonzero(vis)[0]
    cam = record.cameras[view]
    W, H = cam.width, cam.height
    n = len(keep)
    return ViewBatch(cam.R[None, None], cam.t[None, None], cam.intrinsics[None, None], (W, H),
                     record.labels[keep][None], np.array([n]),
                     record.boxes[keep][:, [view]][None], np.ones((1, n, 1), dtype=bool),
                     record.masks[keep][:, [view]][None])
