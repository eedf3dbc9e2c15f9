import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sceneprior.geometry import look_at
from sceneprior.gradsuite import silhouette_error
from sceneprior.render import (RasterConfig, mask_iou, rasterize_instance_ids, rasterize_silhouette, read_mask,
                               read_pgm, smooth_piece, soft_silhouette, write_pgm)
from sceneprior.scene import make_icosphere

CFG = RasterConfig(32, 32)
TRI = np.array([[0, 1, 2]])
DEPTH = np.ones(3)


def _tri_occ(u, v, cfg=CFG):
    return soft_silhouette(np.asarray(u, float), np.asarray(v, float), DEPTH, TRI, cfg).value


def test_raster_config_validation():
    for kw in ({"faces_per_pixel": 0}, {"blur_radius": 0.0}, {"blend_sigma": -1.0}):
        with pytest.raises(ValueError):
            RasterConfig(**kw)


def test_inside_and_far_outside():
    occ = _tri_occ([0.1, 0.9, 0.5], [0.1, 0.1, 0.9])
    # pixel (row 12, col 16) centre (0.516, 0.391) is deep inside
    assert occ[12, 16] > 0.99
    assert occ[31, 0] < 0.01 and occ[0, 31] < 0.01


def test_winding_does_not_matter():
    a = _tri_occ([0.1, 0.9, 0.5], [0.1, 0.1, 0.9])
    b = _tri_occ([0.1, 0.5, 0.9], [0.1, 0.9, 0.1])
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_degenerate_triangle_contributes_nothing():
    assert not _tri_occ([0.1, 0.5, 0.9], [0.1, 0.5, 0.9]).any()


def test_silhouette_vertex_gradient():
    err, skipped = silhouette_error(seed=3)
    assert err < 1e-3


def test_silhouette_gradient_other_seed():
    err, _ = silhouette_error(seed=8, coords=8)
    assert err < 1e-3


@given(st.lists(st.floats(0.05, 0.95), min_size=6, max_size=6), st.floats(1.01, 1.6))
def test_enlarging_a_triangle_never_lowers_occupancy(coords, k):
    u, v = np.array(coords[:3]), np.array(coords[3:])
    cu, cv = u.mean(), v.mean()
    small = _tri_occ(u, v)
    big = _tri_occ(cu + k * (u - cu), cv + k * (v - cv))
    assert np.all(big >= small - 1e-12)


@given(st.lists(st.floats(0.0, 1.0), min_size=6, max_size=6))
def test_occupancy_in_unit_interval(coords):
    occ = _tri_occ(coords[:3], coords[3:])
    assert occ.min() >= 0.0 and occ.max() <= 1.0


def test_one_pixel_shift_shifts_silhouette():
    s = make_icosphere(2)
    u = 0.45 + 0.2 * s.vertices[:, 0]
    v = 0.5 + 0.2 * s.vertices[:, 1]
    z = 3.0 + s.vertices[:, 2]
    base = soft_silhouette(u, v, z, s.faces, CFG).value
    moved = soft_silhouette(u + 1.0 / 32, v, z, s.faces, CFG).value
    assert np.abs(moved[:, 1:] - base[:, :-1]).max() < 1e-6


def test_blended_occupancy_formula():
    # two overlapping triangles at one pixel: 1 - prod(1 - sigmoid(delta_i / sigma))
    cfg = RasterConfig(4, 4, faces_per_pixel=2, blur_radius=0.02, blend_sigma=0.01)
    u = np.array([0.0, 1.0, 0.0, 0.2, 1.0, 1.0])
    v = np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    faces = np.array([[0, 1, 2], [3, 4, 5]])
    occ = soft_silhouette(u, v, np.ones(6), faces, cfg).value
    q = np.array([0.375, 0.375])  # pixel (1, 1)

    def cross(a, b):
        return a[0] * b[1] - a[1] * b[0]

    def sqdist(p, a, b):
        t = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0, 1)
        return np.sum((p - a - t * (b - a)) ** 2)

    deltas = []
    for f in faces:
        pts = np.stack([u[f], v[f]], axis=1)
        d = min(sqdist(q, pts[i], pts[(i + 1) % 3]) for i in range(3))
        a, b, c = pts
        s = [cross(b - a, q - a), cross(c - b, q - b), cross(a - c, q - c)]
        deltas.append(d if (np.all(np.array(s) >= 0) or np.all(np.array(s) <= 0)) else -d)
    ref = 1 - np.prod([1 - 1 / (1 + np.exp(-d / 0.01)) for d in deltas if d > -0.02])
    assert occ[1, 1] == pytest.approx(ref, rel=1e-12)


def test_smooth_piece_changes_only_at_band_crossings():
    u, v = np.array([0.1, 0.9, 0.5]), np.array([0.1, 0.1, 0.9])
    a = smooth_piece(u, v, DEPTH, TRI, CFG)
    b = smooth_piece(u + 1e-9, v, DEPTH, TRI, CFG)
    assert np.array_equal(a, b)


def _sphere(center, radius, level=2):
    s = make_icosphere(level)
    return s.vertices * radius + np.asarray(center), s.faces


def test_instance_ids():
    cam = look_at([0.0, 0.0, 5.0], [0.0, 0.0, 0.0], 32, 32)
    cfg = RasterConfig(32, 32)
    ids = rasterize_instance_ids([_sphere([0, 0, 0], 1.0)], cam, cfg)
    assert ids[16, 16] == 0 and ids[0, 0] == -1
    near = _sphere([0.3, 0, 2.0], 0.5)
    ids2 = rasterize_instance_ids([_sphere([0, 0, 0], 1.0), near], cam, cfg)
    assert ids2[16, 16] == 1
    assert (ids2 == 0).any() and (ids2 == 1).any()
    # order of the mesh list must not change which surface wins
    swapped = rasterize_instance_ids([near, _sphere([0, 0, 0], 1.0)], cam, cfg)
    np.testing.assert_array_equal(np.where(swapped >= 0, 1 - swapped, -1), ids2)
    assert (rasterize_instance_ids([], cam, cfg) == -1).all()


def test_soft_and_hard_silhouettes_agree_on_a_sphere():
    cam = look_at([0.0, 0.5, 4.0], [0.0, 0.5, 0.0], 32, 32)
    verts, faces = _sphere([0, 0.5, 0], 0.8)
    hard = rasterize_instance_ids([(verts, faces)], cam, CFG) == 0
    soft = rasterize_silhouette(verts, faces, cam, CFG).value
    # the soft map is slightly dilated by the blur band
    assert mask_iou(soft > 0.5, hard) > 0.85
    assert np.all(soft[hard] > 0.5)


def test_mask_iou():
    a = np.zeros((2, 2), bool)
    a[0, 0] = a[0, 1] = True
    b = np.zeros((2, 2), bool)
    b[0, 1] = b[1, 1] = True
    assert mask_iou(a, b) == pytest.approx(1 / 3)
    assert mask_iou(a, a) == 1.0
    assert mask_iou(a, ~a) == 0.0
    assert mask_iou(np.zeros((3, 3)), np.zeros((3, 3))) == 0.0
    assert mask_iou(np.array([[0.6, 0.4]]), np.array([[True, False]])) == 1.0
    with pytest.raises(ValueError):
        mask_iou(np.zeros((2, 2)), np.zeros((3, 3)))


@pytest.mark.parametrize("plain", [False, True])
def test_pgm_round_trip(tmp_path, rng, plain):
    m = rng.uniform(size=(5, 7)) > 0.5
    write_pgm(tmp_path / "m.pgm", m, plain=plain)
    assert (tmp_path / "m.pgm").read_bytes()[:2] == (b"P2" if plain else b"P5")
    np.testing.assert_array_equal(read_mask(tmp_path / "m.pgm"), m)
    img = rng.integers(0, 256, (4, 3)).astype(np.uint8)
    write_pgm(tmp_path / "g.pgm", img, plain=plain)
    np.testing.assert_array_equal(read_pgm(tmp_path / "g.pgm"), img)


def test_pgm_threshold_and_errors(tmp_path):
    (tmp_path / "t.pgm").write_bytes(b"P5\n# comment\n3 1\n255\n" + bytes([127, 128, 255]))
    np.testing.assert_array_equal(read_mask(tmp_path / "t.pgm"), [[False, True, True]])
    (tmp_path / "bad.pgm").write_bytes(b"P5\n1 1\n65535\n\0\0")
    with pytest.raises(ValueError, match="maxval"):
        read_pgm(tmp_path / "bad.pgm")
    (tmp_path / "p6.pgm").write_bytes(b"P6\n1 1\n255\n\0\0\0")
    with pytest.raises(ValueError, match="PGM"):
        read_pgm(tmp_path / "p6.pgm")
