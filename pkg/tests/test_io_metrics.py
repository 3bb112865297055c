import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bd_oracle, random_curve
from sdpcc.io_metrics import (
    PSNR_CAP,
    EmptyCloudError,
    OverlapError,
    PlyError,
    RawCloud,
    RdPoint,
    bd_rate,
    bpp,
    d1_mse,
    d1_psnr,
    nearest_sq_dist,
    read_ply,
    read_report,
    report_curve,
    summary_row,
    voxelize,
    write_ply,
    write_report,
)
from sdpcc.sparse_tensor import canonicalize
from sdpcc.synthetic import random_cloud


# -- PLY ---------------------------------------------------------------------------


def test_ascii_roundtrip(tmp_path):
    pts = np.array([[0.5, 1.25, -3.0], [1e-3, 2.0, 7.75], [100.0, 0.0, 0.1]])
    write_ply(RawCloud(pts), tmp_path / "a.ply", format="ascii", dtype="double")
    assert np.array_equal(read_ply(tmp_path / "a.ply").points, pts)


def test_binary_roundtrip_float32_exact(tmp_path):
    pts = np.random.default_rng(0).standard_normal((500, 3)).astype(np.float32)
    write_ply(pts, tmp_path / "b.ply", comments=["bit_depth 7"])
    back = read_ply(tmp_path / "b.ply")
    assert np.array_equal(back.points, pts.astype(np.float64))
    assert back.comments == ["bit_depth 7"]


def test_int_coordinates_from_tensor(tmp_path):
    t = random_cloud(np.random.default_rng(1), 50, 6)
    write_ply(t, tmp_path / "c.ply", dtype="int")
    assert np.array_equal(read_ply(tmp_path / "c.ply").points, t.coords)


def _write(path, text: bytes):
    path.write_bytes(text)
    return path


def test_extra_properties_and_elements_ignored(tmp_path):
    body = (b"ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\n"
            b"property uchar red\nproperty float y\nproperty float z\nelement face 1\n"
            b"property list uchar int vertex_indices\nend_header\n1 255 2 3\n4 0 5 6\n3 0 1 1\n")
    cloud = read_ply(_write(tmp_path / "d.ply", body))
    assert cloud.points.tolist() == [[1, 2, 3], [4, 5, 6]]


def test_binary_extra_properties(tmp_path):
    rec = np.zeros(3, dtype=[("x", "<f4"), ("s", "<u2"), ("y", "<f4"), ("z", "<f8")])
    rec["x"], rec["y"], rec["z"], rec["s"] = [1, 2, 3], [4, 5, 6], [7, 8, 9], 65535
    head = (b"ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\n"
            b"property ushort s\nproperty float y\nproperty double z\nend_header\n")
    cloud = read_ply(_write(tmp_path / "e.ply", head + rec.tobytes()))
    assert cloud.points.tolist() == [[1, 4, 7], [2, 5, 8], [3, 6, 9]]


@pytest.mark.parametrize("body", [
    b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\n1 2 3\n",
    b"ply\nformat binary_big_endian 1.0\nelement vertex 0\nproperty float x\nproperty float y\n"
    b"property float z\nend_header\n",
    b"plx\nformat ascii 1.0\nend_header\n",
    b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n1 2\n",
    b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n"
    b"end_header\n1 2 3\n",
    b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty float x\nproperty float y\n"
    b"property float z\nend_header\n\x00\x00",
])
def test_malformed_ply(tmp_path, body):
    with pytest.raises(PlyError):
        read_ply(_write(tmp_path / "bad.ply", body))


# -- voxelization ------------------------------------------------------------------


def test_integer_cloud_is_identity():
    t = random_cloud(np.random.default_rng(2), 80, 5)
    pts = np.vstack([t.coords, [[0, 0, 0], [31, 31, 31]]])
    v = voxelize(RawCloud(pts[::-1].astype(float)), 5)
    assert np.array_equal(v.coords, canonicalize(np.unique(pts, axis=0), None, 5).coords)


def test_duplicates_merge():
    v = voxelize(RawCloud([[0, 0, 0], [0.1, 0.1, 0.1], [10, 10, 10]]), 2)
    assert len(v) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.floats(0.01, 100))
def test_inverse_mapping_within_half_step(seed, depth, extent):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, extent, size=(40, 3))
    v, tf = voxelize(RawCloud(pts), depth, return_transform=True)
    back = tf.to_world(tf.to_grid(pts))
    assert np.all(np.abs(back - pts) <= 0.5 / tf.scale + 1e-9)
    assert v.coords.max() <= (1 << depth) - 1


def test_voxelize_errors():
    with pytest.raises(EmptyCloudError):
        voxelize(RawCloud(np.zeros((0, 3))), 5)
    with pytest.raises(ValueError):
        voxelize(RawCloud([[0, 0, 0]]), 17)
    with pytest.raises(ValueError):
        RawCloud([[0, np.nan, 0]])


# -- D1 ---------------------------------------------------------------------------------


def test_d1_closed_form():
    assert d1_psnr([[0, 0, 0]], [[1, 0, 0]], 10) == pytest.approx(10 * math.log10(3 * 1023**2), abs=1e-9)
    assert d1_psnr([[0, 0, 0]], [[1, 0, 0]], 10) == pytest.approx(64.96872522, abs=1e-6)


def test_d1_identical_hits_cap():
    t = random_cloud(np.random.default_rng(3), 100, 6)
    assert d1_psnr(t, t, 6) == PSNR_CAP


def test_d1_max_of_directions():
    # b has an extra far point: b->a sees it, a->b does not
    a = np.array([[0, 0, 0], [4, 0, 0]])
    b = np.array([[0, 0, 0], [4, 0, 0], [4, 6, 0]])
    assert d1_mse(a, b) == pytest.approx(36 / 3)
    assert d1_mse(a, b) == d1_mse(b, a)


def test_d1_empty():
    with pytest.raises(EmptyCloudError):
        d1_psnr(np.zeros((0, 3)), [[0, 0, 0]], 4)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 300), st.integers(1, 300), st.integers(1, 9))
def test_nearest_matches_brute_force(seed, n, k, cell):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 64, size=(n, 3))
    q = rng.integers(0, 64, size=(k, 3))
    brute = ((q[:, None, :] - pts[None, :, :]) ** 2).sum(-1).min(axis=1)
    assert np.array_equal(nearest_sq_dist(q, pts), brute)
    assert np.array_equal(nearest_sq_dist(q, pts, cell=cell), brute)


def test_nearest_far_outlier():
    pts = np.array([[0, 0, 0], [1, 0, 0], [1000, 1000, 1000]])
    assert nearest_sq_dist([[999, 1000, 1000], [3, 0, 0]], pts).tolist() == [1, 4]


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_d1_symmetric_and_monotone_under_inflation(seed, step):
    rng = np.random.default_rng(seed)
    a = rng.integers(100, 200, size=(60, 3))
    # scaling about the centre by s moves every point (s-1)*|p-c| away
    c = a.mean(axis=0).round().astype(np.int64)
    near = (a - c) * (1 + step) + c
    far = (a - c) * (2 + step) + c
    assert d1_psnr(a, near, 10) == d1_psnr(near, a, 10)
    assert d1_psnr(a, far, 10) < d1_psnr(a, near, 10)


# -- rate metrics -----------------------------------------------------------------------


def test_bpp():
    assert bpp(125, 1000) == 1.0
    assert bpp(250, 1000) == 2 * bpp(125, 1000)
    with pytest.raises(ValueError):
        bpp(10, 0)


def _curve(rates, qualities):
    return [RdPoint(r, q) for r, q in zip(rates, qualities)]


def test_bd_rate_matches_dense_oracle():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a, b = random_curve(rng), random_curve(rng)
        want = bd_oracle(a, b)
        got = bd_rate(a, b)
        assert abs(got - want) <= 1e-3 * max(1.0, abs(want))


def test_bd_rate_identity_and_halving():
    a = _curve([0.1, 0.2, 0.4, 0.8], [30, 34, 37, 39])
    assert bd_rate(a, a) == pytest.approx(0.0, abs=1e-9)
    half = _curve([p.rate / 2 for p in a], [p.quality for p in a])
    assert bd_rate(a, half) == pytest.approx(-50.0, abs=1e-9)
    assert bd_rate(half, a) == pytest.approx(100.0, abs=1e-9)


def test_bd_rate_antisymmetric_sign():
    rng = np.random.default_rng(5)
    for _ in range(10):
        a, b = random_curve(rng), random_curve(rng)
        ab, ba = bd_rate(a, b), bd_rate(b, a)
        assert ab * ba < 0 or ab == ba == 0


def test_bd_rate_errors():
    a = _curve([0.1, 0.2, 0.4, 0.8], [30, 34, 37, 39])
    with pytest.raises(OverlapError):
        bd_rate(a, _curve([0.1, 0.2, 0.4, 0.8], [50, 54, 57, 59]))
    with pytest.raises(ValueError):
        bd_rate(a[:3], a[:3])
    with pytest.raises(ValueError):
        bd_rate(a, _curve([0.1, 0.1, 0.4, 0.8], [30, 34, 37, 39]))


def test_report_roundtrip(tmp_path):
    frames = [
        {"frame": 0, "type": "I", "bytes": 100, "bpp": 0.8, "d1_psnr": 60.0, "points": 1000},
        {"frame": 1, "type": "P", "bytes": 50, "bpp": 0.4, "d1_psnr": 70.0, "points": 1000},
    ]
    rows = frames + [summary_row(frames)]
    assert rows[-1]["bpp"] == pytest.approx(0.6) and rows[-1]["d1_psnr"] == 65.0
    write_report(rows, tmp_path / "r.csv")
    back = read_report(tmp_path / "r.csv")
    assert [r["frame"] for r in back] == ["0", "1", "summary"]
    assert report_curve(back) == [RdPoint(0.6, 65.0)]
