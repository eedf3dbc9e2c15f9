import json
from collections import Counter
from pathlib import Path

import numpy as np
import pytest

from sceneprior.data import (CATEGORY_PRIORS, MANIFEST, SHAPE_FAMILIES, DatasetError, DatasetSpec,
                             generate_dataset, load_dataset, retrieval_library, single_view_batch)
from sceneprior.geometry import project_np
from sceneprior.render import read_mask
from sceneprior.scene import TOY_CATEGORIES

from conftest import TINY_SPEC


def _tree(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_spec_validation_and_round_trip():
    with pytest.raises(ValueError):
        DatasetSpec(n_views=3)
    with pytest.raises(ValueError):
        DatasetSpec(min_objects=3, max_objects=2)
    with pytest.raises(ValueError):
        DatasetSpec(min_objects=0)
    assert DatasetSpec.from_dict(json.loads(json.dumps(TINY_SPEC.to_dict()))) == TINY_SPEC


def test_regeneration_is_byte_identical(tiny_data_dir, tmp_path):
    generate_dataset(TINY_SPEC, tmp_path / "again")
    assert _tree(tiny_data_dir) == _tree(tmp_path / "again")


def test_seed_changes_the_data(tiny_data_dir, tmp_path):
    from dataclasses import replace
    generate_dataset(replace(TINY_SPEC, seed=6), tmp_path / "other")
    assert _tree(tiny_data_dir) != _tree(tmp_path / "other")


def test_manifest_references_existing_files(tiny_data_dir):
    man = json.loads((tiny_data_dir / MANIFEST).read_text())
    assert len(man["scenes"]) == TINY_SPEC.n_scenes
    for s in man["scenes"]:
        assert (tiny_data_dir / s["scene"]).is_file()
        assert len(s["views"]) == TINY_SPEC.n_views
        for v in s["views"]:
            assert (tiny_data_dir / v["camera"]).is_file()
            for ob in v["objects"]:
                assert (tiny_data_dir / ob["mask"]).is_file()
                assert ob["label"] == s["labels"][ob["track"]]


def test_objects_do_not_overlap(tiny_dataset):
    for rec in tiny_dataset.records:
        objs = rec.scene.objects
        assert TINY_SPEC.min_objects <= len(objs) <= TINY_SPEC.max_objects
        for i in range(len(objs)):
            a = objs[i]
            assert a.center[1] - a.size[1] / 2 == pytest.approx(0.0, abs=1e-12)  # resting on the floor
            for j in range(i + 1, len(objs)):
                b = objs[j]
                gap = np.abs(a.center - b.center) - (a.size + b.size) / 2
                assert gap.max() >= 0


def test_masks_are_mutually_exclusive_and_nonempty(tiny_dataset):
    for rec in tiny_dataset.records:
        for p in range(rec.n_views):
            m = rec.masks[:, p]
            assert m.sum(axis=0).max() <= 1
            np.testing.assert_array_equal(m.any(axis=(1, 2)), rec.visible[:, p])


def test_every_object_seen_in_two_views(tiny_dataset):
    for rec in tiny_dataset.records:
        assert np.all(rec.visible.sum(axis=1) >= 2)


def test_boxes_contain_the_projected_centre_and_mask(tiny_dataset):
    for rec in tiny_dataset.records:
        W, H = tiny_dataset.image_size
        for j, obj in enumerate(rec.scene.objects):
            for p, cam in enumerate(rec.cameras):
                if not rec.visible[j, p]:
                    continue
                b = rec.boxes[j, p]
                assert 0 <= b[0] < b[2] <= 1 and 0 <= b[1] < b[3] <= 1
                rows, cols = np.nonzero(rec.masks[j, p])
                # every mask pixel centre lies in the box of the projected mesh
                assert ((cols + 0.5) / W >= b[0] - 1e-9).all() and ((cols + 0.5) / W <= b[2] + 1e-9).all()
                assert ((rows + 0.5) / H >= b[1] - 1e-9).all() and ((rows + 0.5) / H <= b[3] + 1e-9).all()
                u, v, _ = project_np(obj.world_vertices(), cam)
                np.testing.assert_allclose(b, np.clip([u.min(), v.min(), u.max(), v.max()], 0, 1), atol=1e-12)


def test_tracks_are_consistent_across_views(tiny_data_dir, tiny_dataset):
    man = json.loads((tiny_data_dir / MANIFEST).read_text())
    for s, rec in zip(man["scenes"], tiny_dataset.records):
        counts = Counter(ob["track"] for v in s["views"] for ob in v["objects"])
        assert set(counts) == set(range(s["n_objects"]))
        for p, v in enumerate(s["views"]):
            for ob in v["objects"]:
                np.testing.assert_array_equal(read_mask(tiny_data_dir / ob["mask"]), rec.masks[ob["track"], p])


def _edge_counts(faces):
    c = Counter()
    for f in faces:
        for i in range(3):
            c[tuple(sorted((int(f[i]), int(f[(i + 1) % 3]))))] += 1
    return c


@pytest.mark.parametrize("name", sorted(SHAPE_FAMILIES))
def test_shape_families_are_closed_and_outward(name):
    mesh = SHAPE_FAMILIES[name]()
    assert set(_edge_counts(mesh.faces).values()) == {2}
    a, b, c = (mesh.vertices[mesh.faces[:, i]] for i in range(3))
    assert np.einsum("ij,ij->i", a, np.cross(b, c)).sum() > 0
    assert np.abs(mesh.vertices).max() == pytest.approx(1.0)


def test_priors_cover_categories_and_library():
    assert set(CATEGORY_PRIORS) == set(TOY_CATEGORIES.names[1:])
    assert all(fam in SHAPE_FAMILIES for fam, _, _ in CATEGORY_PRIORS.values())
    lib = retrieval_library()
    assert set(lib) == set(TOY_CATEGORIES.names[1:])
    assert all(set(v) == set(SHAPE_FAMILIES) for v in lib.values())


def test_impossible_layout_raises(tmp_path):
    spec = DatasetSpec(n_scenes=1, min_objects=8, max_objects=8, room_half_extent=1.0, n_views=4,
                       image_size=(16, 16))
    with pytest.raises(DatasetError):
        generate_dataset(spec, tmp_path / "x")


def test_single_view_batch(tiny_dataset):
    rec = tiny_dataset.records[0]
    for p in range(rec.n_views):
        vb = single_view_batch(rec, p)
        n = int(rec.visible[:, p].sum())
        assert vb.n_objects[0] == n and vb.n_views == 1
        assert vb.visible[0, :n].all()


def test_load_matches_manifest(tiny_data_dir):
    ds = load_dataset(tiny_data_dir)
    assert len(ds) == TINY_SPEC.n_scenes
    assert ds.image_size == TINY_SPEC.image_size
    assert ds.category_histogram().sum() == sum(r.n_objects for r in ds.records)
