import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from pcsod import data as D


def _view(n=50, seed=0, labels=True):
    rng = np.random.default_rng(seed)
    lab = rng.integers(0, 2, n) if labels else None
    return D.PointView(rng.normal(size=(n, 3)), rng.uniform(size=(n, 3)), lab)


ASCII_PLY = """ply
format ascii 1.0
comment three labeled points
element vertex 3
property float x
property float y
property float z
property uchar red
property uchar green
property uchar blue
property uchar label
end_header
0 0 0 255 0 0 1
1 0 0 0 255 0 0
0 1 0.5 0 0 255 1
"""


def test_ascii_ply_readback(tmp_path):
    p = tmp_path / "a.ply"
    p.write_text(ASCII_PLY)
    v = D.load_ply(p)
    assert v.labels.tolist() == [1, 0, 1]
    np.testing.assert_array_equal(v.colors, np.eye(3))
    assert v.positions[2].tolist() == [0, 1, 0.5]


def test_binary_round_trip_bit_exact(tmp_path):
    v = _view(200)
    D.save_ply(v, tmp_path / "b.ply")
    w = D.load_ply(tmp_path / "b.ply")
    assert w.positions.tobytes() == v.positions.tobytes()
    np.testing.assert_array_equal(w.labels, v.labels)
    # colors survive up to the 8-bit quantization
    np.testing.assert_allclose(w.colors, np.rint(v.colors * 255) / 255, atol=0, rtol=0)


def test_ascii_round_trip(tmp_path):
    v = D.generate_scene(D.SceneRecipe(seed=3), n_points=300)
    D.save_ply(v, tmp_path / "a.ply", format="ascii")
    w = D.load_ply(tmp_path / "a.ply")
    np.testing.assert_array_equal(w.positions, v.positions)
    np.testing.assert_array_equal(w.colors, v.colors)
    np.testing.assert_array_equal(w.labels, v.labels)


def test_big_endian_is_read(tmp_path):
    pos = np.array([[1.5, -2.0, 3.25]], dtype=">f4")
    body = pos.tobytes() + bytes([10, 20, 30])
    header = (b"ply\nformat binary_big_endian 1.0\nelement vertex 1\nproperty float x\n"
              b"property float y\nproperty float z\nproperty uchar red\nproperty uchar green\n"
              b"property uchar blue\nend_header\n")
    (tmp_path / "be.ply").write_bytes(header + body)
    v = D.load_ply(tmp_path / "be.ply")
    assert v.positions.tolist() == [[1.5, -2.0, 3.25]]
    assert not v.has_labels


@pytest.mark.parametrize("text,message", [
    (ASCII_PLY.replace("property float z\n", ""), "missing property z"),
    (ASCII_PLY.replace("ply\n", "plx\n", 1), "malformed header"),
    (ASCII_PLY.replace("end_header\n", ""), "malformed header"),
    (ASCII_PLY.replace("element vertex 3", "element vertex 4"), "truncated payload in element vertex"),
    (ASCII_PLY.replace("element vertex 3", "element face 3"), "missing element vertex"),
])
def test_ply_errors(tmp_path, text, message):
    p = tmp_path / "bad.ply"
    p.write_text(text)
    with pytest.raises(D.PlyError, match=message):
        D.load_ply(p)


def test_binary_truncated(tmp_path):
    D.save_ply(_view(20), tmp_path / "t.ply")
    raw = (tmp_path / "t.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(raw[:-5])
    with pytest.raises(D.PlyError, match="truncated payload in element vertex"):
        D.load_ply(tmp_path / "t.ply")


def test_scalar_heat_colors(tmp_path):
    v = _view(10)
    D.save_ply(v, tmp_path / "h.ply", scalar=np.ones(10))
    w = D.load_ply(tmp_path / "h.ply")
    np.testing.assert_array_equal(w.colors, np.tile([1.0, 0.0, 0.0], (10, 1)))
    with pytest.raises(ValueError, match="scalar out of range"):
        D.save_ply(v, tmp_path / "x.ply", scalar=np.full(10, 1.5))


def test_encode_unit_cube_corners():
    corners = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], dtype=float)
    enc = D.encode_input(D.PointView(corners, np.zeros((8, 3))))
    np.testing.assert_array_equal(enc.normalized, corners)
    np.testing.assert_array_equal(enc.centered, corners - 0.5)


def test_encode_single_point():
    enc = D.encode_input(D.PointView([[3.0, -1.0, 2.0]], [[0.1, 0.2, 0.3]]))
    np.testing.assert_array_equal(enc.centered, [[0, 0, 0]])
    np.testing.assert_array_equal(enc.normalized, [[0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(enc.rgb, [[0.1, 0.2, 0.3]])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**31), st.floats(-1e3, 1e3), st.floats(1e-3, 1e3))
def test_encode_invariants(n, seed, shift, scale):
    rng = np.random.default_rng(seed)
    v = D.PointView(rng.normal(size=(n, 3)) * scale + shift, rng.uniform(size=(n, 3)))
    f = D.encode_input(v).features
    assert f.shape == (n, 9)
    assert np.abs(f[:, :3].mean(axis=0)).max() <= 1e-9 * max(1.0, scale)
    assert f[:, 6:].min() >= 0.0 and f[:, 6:].max() <= 1.0


def test_training_block_sampling():
    one = D.PointView([[0, 0, 0]], [[0, 0, 0]])
    np.testing.assert_array_equal(D.sample_training_block(one, 16, 0), np.zeros(16, dtype=int))
    v = _view(100)
    np.testing.assert_array_equal(D.sample_training_block(v, 64, 5), D.sample_training_block(v, 64, 5))


def test_training_block_uniform_chi_square():
    n = 240_000
    v = D.PointView(np.zeros((n, 3)), np.zeros((n, 3)))
    rng = np.random.default_rng(11)
    counts = np.zeros(n)
    drawn = 0
    while drawn < 1_000_000:
        counts += np.bincount(D.sample_training_block(v, 4096, rng), minlength=n)
        drawn += 4096
    _, p = stats.chisquare(counts)
    assert p > 0.01


def test_chunk_plan_240k():
    n = 240_000
    v = D.PointView(np.zeros((n, 3)), np.zeros((n, 3)))
    plan = D.plan_chunks(v, 4096, 0)
    assert len(plan.blocks) == 59
    assert all(len(b) == 4096 for b in plan.blocks)
    assert (plan.coverage >= 1).all()
    assert plan.coverage.sum() == 59 * 4096
    # only the padded tail revisits points
    assert len(np.unique(np.concatenate(plan.blocks[:58]))) == 58 * 4096


def test_chunk_plan_exact_fit_and_small_view():
    plan = D.plan_chunks(_view(4096), 4096, 1)
    assert len(plan.blocks) == 1 and (plan.coverage == 1).all()
    plan = D.plan_chunks(_view(10), 4096, 1)
    assert len(plan.blocks) == 1 and plan.coverage.min() >= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3000), st.sampled_from([256, 512, 1024]), st.integers(0, 2**31))
def test_chunk_plan_covers_every_point(n, block, seed):
    plan = D.plan_chunks(_view(n, labels=False), block, seed)
    assert len(plan.blocks) == math.ceil(n / block)
    assert set(np.concatenate(plan.blocks).tolist()) == set(range(n))
    np.testing.assert_array_equal(plan.coverage, np.bincount(np.concatenate(plan.blocks), minlength=n))


def test_rotation_examples():
    v = D.PointView([[1.0, 0.0, 0.0]], [[0, 0, 0]])
    np.testing.assert_allclose(D.augment_rotation(v, angle=math.pi).positions, [[-1, 0, 0]], atol=1e-15)
    w = _view(20)
    np.testing.assert_array_equal(D.augment_rotation(w, angle=0.0).positions, w.positions)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_rotation_is_vertical_isometry(seed):
    v = _view(40, seed)
    r = D.augment_rotation(v, seed)
    d0 = np.linalg.norm(v.positions[:, None] - v.positions[None], axis=-1)
    d1 = np.linalg.norm(r.positions[:, None] - r.positions[None], axis=-1)
    assert np.abs(d0 - d1).max() <= 1e-9
    np.testing.assert_array_equal(r.positions[:, 2], v.positions[:, 2])
    np.testing.assert_array_equal(r.labels, v.labels)


def test_scene_contract():
    v = D.generate_scene(D.SceneRecipe(seed=1, object_kind="sphere", fraction=0.1), n_points=4096)
    assert len(v) == 4096
    assert 0.08 <= v.labels.mean() <= 0.12
    w = D.generate_scene(D.SceneRecipe(seed=1, object_kind="sphere", fraction=0.1), n_points=4096)
    assert v.positions.tobytes() == w.positions.tobytes()
    assert v.colors.tobytes() == w.colors.tobytes()


@pytest.mark.parametrize("kind", D.OBJECT_KINDS)
def test_scene_bytes_identical(tmp_path, kind):
    r = D.SceneRecipe(seed=9, object_kind=kind, fraction=0.2, clutter=3)
    D.save_ply(D.generate_scene(r, 2000), tmp_path / "a.ply")
    D.save_ply(D.generate_scene(r, 2000), tmp_path / "b.ply")
    assert (tmp_path / "a.ply").read_bytes() == (tmp_path / "b.ply").read_bytes()
    assert D.load_ply(tmp_path / "a.ply").labels.sum() == 400


def test_scene_object_is_inside_bounds():
    v, (lo, hi) = D.generate_scene(D.SceneRecipe(seed=4, object_kind="torus"), 3000, return_bounds=True)
    obj = v.positions[v.labels == 1]
    assert (obj >= lo).all() and (obj <= hi).all()


def test_recipe_text_round_trip_and_errors():
    r = D.SceneRecipe(seed=7, object_kind="box", fraction=0.15, clutter=2, illumination=0.9)
    assert D.SceneRecipe.from_text(r.to_text()) == r
    with pytest.raises(KeyError, match="unknown key 'colour'"):
        D.SceneRecipe.from_text(r.to_text() + "colour=red\n")
    with pytest.raises(KeyError, match="missing key 'clutter'"):
        D.SceneRecipe.from_text(r.to_text().replace("clutter=2\n", ""))
    with pytest.raises(ValueError):
        D.SceneRecipe(seed=1, object_kind="cone")


def test_view_validation():
    with pytest.raises(ValueError, match="colors"):
        D.PointView([[0, 0, 0]], [[2, 0, 0]])
    with pytest.raises(ValueError, match="labels"):
        D.PointView([[0, 0, 0]], [[0, 0, 0]], [3])
    with pytest.raises(ValueError, match="2 colors for 1 points"):
        D.PointView([[0, 0, 0]], [[0, 0, 0], [0, 0, 0]])


def test_load_dataset(tmp_path):
    (tmp_path / "train").mkdir()
    for name in ("c", "a", "b"):
        D.save_ply(_view(5, seed=ord(name)), tmp_path / "train" / f"{name}.ply")
    views = D.load_dataset(tmp_path, "train")
    assert [v.view_id for v in views] == ["a", "b", "c"]
    with pytest.raises(FileNotFoundError, match=str(tmp_path / "test")):
        D.load_dataset(tmp_path, "test")
    D.save_ply(_view(5, labels=False), tmp_path / "train" / "d.ply")
    with pytest.raises(ValueError, match="train views require labels"):
        D.load_dataset(tmp_path, "train")
    (tmp_path / "test").mkdir()
    with pytest.raises(ValueError, match="no .ply files"):
        D.load_dataset(tmp_path, "test")


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("PCSOD_THREADS", "3")
    assert D.worker_count() == 3
    monkeypatch.delenv("PCSOD_THREADS")
    assert 1 <= D.worker_count() <= 4


def test_import_text_table(tmp_path):
    src = tmp_path / "scan.txt"
    src.write_text("0 0 0 255 255 255 1\n1 2 3 0 128 255 0\n")
    v = D.import_xyzrgbl(src, tmp_path / "scan.ply")
    w = D.load_ply(tmp_path / "scan.ply")
    assert w.labels.tolist() == [1, 0]
    np.testing.assert_array_equal(w.positions, v.positions)
