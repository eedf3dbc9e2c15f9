"""Scenes, objects, template meshes and their file formats.

World frame: y is up, the floor is the plane y = 0 and the floor centre is
the origin.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_SUBDIVISIONS = 4
CANONICAL_BOUND = 1.5


class SceneFormatError(ValueError):
    """Malformed or invalid scene/mesh file."""


@dataclass(frozen=True)
class CategoryTable:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ValueError("category table needs void plus at least one class")
        if names[0] != "void":
            raise ValueError("index 0 must be 'void'")
        if len(set(names)) != len(names):
            raise ValueError("category names must be unique")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


TOY_CATEGORIES = CategoryTable(("void", "bed", "wardrobe", "nightstand", "chair", "table", "lamp"))


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class TemplateSphere(Mesh):
    level: int = 0


# --------------------------------------------------------------------- icosphere

def _icosahedron():
    r = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, r, 0], [1, r, 0], [-1, -r, 0], [1, -r, 0],
        [0, -1, r], [0, 1, r], [0, -1, -r], [0, 1, -r],
        [r, 0, -1], [r, 0, 1], [-r, 0, -1], [-r, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    return v / np.linalg.norm(v, axis=1, keepdims=True), f


def make_icosphere(subdivisions: int = 2) -> TemplateSphere:
    """Unit icosphere; level k has 10*4^k + 2 vertices and 20*4^k faces."""
    if not 0 <= subdivisions <= MAX_SUBDIVISIONS:
        raise ValueError(f"subdivisions must be in [0, {MAX_SUBDIVISIONS}], got {subdivisions}")
    verts, faces = _icosahedron()
    verts = list(verts)
    for _ in range(subdivisions):
        cache: dict[tuple, int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new, dtype=np.int64)
    v = np.array(verts)
    return TemplateSphere(v, faces, subdivisions)


def face_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    return np.cross(b - a, c - a)


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    return 0.5 * np.linalg.norm(face_normals(vertices, faces), axis=1)


def euler_characteristic(mesh: Mesh) -> int:
    f = mesh.faces
    edges = {tuple(sorted(e)) for e in np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])}
    return mesh.n_vertices - len(edges) + len(f)


def is_closed_manifold(faces: np.ndarray) -> bool:
    """Every undirected edge is shared by exactly two faces with opposite orientation."""
    directed = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fwd = {tuple(e) for e in directed}
    if len(fwd) != len(directed):
        return False
    return all((b, a) in fwd for a, b in fwd)


# --------------------------------------------------------------------- transforms

def to_world(vertices, size, center) -> np.ndarray:
    """Elementwise scale then translate: v -> size * v + center."""
    size = np.asarray(size, dtype=np.float64)
    if np.any(size <= 0):
        raise ValueError(f"nonpositive size {size.tolist()}")
    return np.asarray(vertices, dtype=np.float64) * size + np.asarray(center, dtype=np.float64)


def from_world(vertices, size, center) -> np.ndarray:
    return (np.asarray(vertices) - np.asarray(center)) / np.asarray(size)


# --------------------------------------------------------------------- objects / scenes

@dataclass
class ObjectInstance:
    """Labelled axis-aligned box with a canonical mesh.

    ``mesh`` vertices live in the canonical frame, roughly [-1, 1]^3; the world
    mesh is ``to_world(mesh.vertices, size / 2, center)``.
    """

    label: int
    center: np.ndarray
    size: np.ndarray
    mesh: Mesh | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)

    def validate(self, n_categories: int | None = None) -> None:
        if np.any(self.size <= 0):
            raise SceneFormatError(f"nonpositive size {self.size.tolist()}")
        if self.center[1] - self.size[1] / 2 < -1e-9:
            raise SceneFormatError(f"object below floor: bottom at {self.center[1] - self.size[1] / 2:.6g}")
        if n_categories is not None and not 0 <= self.label < n_categories:
            raise SceneFormatError(f"unknown category index {self.label}")

    def canonical_excursion(self) -> float:
        """Largest |coordinate| of the canonical mesh (diagnostic; nominal bound 1.5)."""
        return 0.0 if self.mesh is None else float(np.abs(self.mesh.vertices).max())

    def world_vertices(self) -> np.ndarray:
        return to_world(self.mesh.vertices, self.size / 2.0, self.center)

    def box_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.center - self.size / 2.0, self.center + self.size / 2.0


@dataclass
class Scene:
    objects: list = field(default_factory=list)
    categories: CategoryTable = TOY_CATEGORIES

    def __len__(self):
        return len(self.objects)

    def labels(self) -> list[int]:
        return [o.label for o in self.objects]

    def validate(self, max_objects: int | None = None) -> None:
        if max_objects is not None and len(self.objects) > max_objects:
            raise SceneFormatError(f"{len(self.objects)} objects exceeds maximum {max_objects}")
        for o in self.objects:
            o.validate(len(self.categories))


# --------------------------------------------------------------------- file formats

def write_obj(path, mesh: Mesh) -> None:
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> Mesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: {exc}") from None
    return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3))


def scene_to_dict(scene: Scene, mesh_faces: bool = True) -> dict:
    objs = []
    for o in scene.objects:
        d = {"label": int(o.label), "center": o.center.tolist(), "size": o.size.tolist()}
        if o.mesh is not None:
            d["mesh"] = {"vertices": o.mesh.vertices.tolist()}
            if mesh_faces:
                d["mesh"]["faces"] = o.mesh.faces.tolist()
        objs.append(d)
    return {"categories": list(scene.categories.names), "objects": objs}


def scene_from_dict(data: dict, base_dir=None) -> Scene:
    try:
        cats = CategoryTable(tuple(data["categories"]))
        objects = []
        for i, d in enumerate(data["objects"]):
            mesh = None
            m = d.get("mesh")
            if isinstance(m, str):
                mesh = read_obj(Path(base_dir or ".") / m)
            elif isinstance(m, dict):
                v = np.array(m["vertices"], dtype=np.float64).reshape(-1, 3)
                f = np.array(m.get("faces", []), dtype=np.int64).reshape(-1, 3)
                mesh = Mesh(v, f)
            elif isinstance(m, list):
                mesh = Mesh(np.array(m, dtype=np.float64).reshape(-1, 3), np.zeros((0, 3), np.int64))
            label = d["label"]
            if isinstance(label, str):
                if label not in cats.names:
                    raise SceneFormatError(f"object {i}: unknown category {label!r}")
                label = cats.index(label)
            objects.append(ObjectInstance(int(label), d["center"], d["size"], mesh))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneFormatError):
            raise
        raise SceneFormatError(f"malformed scene: {exc}") from None
    scene = Scene(objects, cats)
    scene.validate()
    return scene


def write_scene(path, scene: Scene) -> None:
    # repr-based float output keeps 17 significant digits, so reads are exact
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=1))


def read_scene(path) -> Scene:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"malformed JSON in {path}: {exc}") from None
    return scene_from_dict(data, base_dir=path.parent)


def stack_vertices(meshes: Sequence[Mesh]) -> np.ndarray:
    return np.stack([m.vertices for m in meshes])
