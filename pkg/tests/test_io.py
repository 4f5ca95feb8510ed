import json

import numpy as np
import pytest

from mvsfs import io
from mvsfs.evalmetrics import chamfer_l1
from mvsfs.synthetic import cube, make_scene


@pytest.fixture(scope="module")
def tiny_scene():
    return make_scene("sphere", views=4, resolution=48, detail=2)


def test_dataset_round_trip(tmp_path, tiny_scene):
    _, _, ds = tiny_scene
    io.save_dataset(ds, tmp_path)
    a = io.load_dataset(tmp_path)
    b = io.load_dataset(tmp_path)
    assert len(a) == 4 and a == b
    for va, v in zip(a.views, ds.views):
        assert np.array_equal(va.mask, v.mask)
        assert va.camera == v.camera
        assert np.max(np.abs(va.image - v.image)) <= 0.5 / 255 + 1e-12


def test_bad_camera_names_view(tmp_path, tiny_scene):
    _, _, ds = tiny_scene
    io.save_dataset(ds, tmp_path)
    meta = json.loads((tmp_path / "cameras.json").read_text())
    meta["views"][2]["K"][4] = 0.0  # fy = 0
    (tmp_path / "cameras.json").write_text(json.dumps(meta))
    with pytest.raises(io.DatasetError, match="view 2"):
        io.load_dataset(tmp_path)


def test_missing_image_is_reported(tmp_path, tiny_scene):
    _, _, ds = tiny_scene
    io.save_dataset(ds, tmp_path)
    (tmp_path / "images" / "0001.png").unlink()
    with pytest.raises(io.DatasetError, match="0001.png"):
        io.load_dataset(tmp_path)


@pytest.mark.parametrize("suffix", [".obj", ".ply"])
def test_mesh_round_trip(tmp_path, suffix):
    m = cube(0.5, 3)
    m = m.with_albedo(np.random.default_rng(0).random((m.n_vertices, 3)))
    path = tmp_path / f"cube{suffix}"
    io.export_mesh(m, path)
    r = io.load_mesh(path)
    assert r.n_vertices == m.n_vertices and r.n_faces == m.n_faces
    assert np.array_equal(r.vertices, m.vertices)
    assert np.array_equal(r.faces, m.faces)
    assert chamfer_l1(r, m, 2000) < 1e-12
    if suffix == ".ply":
        assert np.allclose(r.vertex_albedo, m.vertex_albedo, atol=1e-7)


def test_ply_without_albedo(tmp_path):
    m = cube(0.5, 2)
    io.export_mesh(m, tmp_path / "c.ply")
    assert io.load_mesh(tmp_path / "c.ply").vertex_albedo is None


def test_light_round_trip(tmp_path):
    io.write_light(tmp_path / "l.json", np.arange(9.0))
    assert np.array_equal(io.read_light(tmp_path / "l.json"), np.arange(9.0))
    (tmp_path / "bad.json").write_text("[1, 2]")
    with pytest.raises(ValueError):
        io.read_light(tmp_path / "bad.json")
