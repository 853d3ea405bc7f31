import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snowldm.range_codec import (
    CodecError, PointCloud, RangeImage, SensorConfig, depth_of, pgm_bytes, project, read_lpc,
    read_pgm, read_rimg, unproject, write_lpc, write_pgm, write_rimg,
)


def _scalar_bin(x, y, z, W, r_max):
    """Independent per-point evaluation of the column and depth formulas."""
    theta = math.atan2(y, x)
    col = int(math.floor((theta + math.pi) / (2 * math.pi) * W)) % W
    r = math.sqrt(x * x + y * y + z * z)
    return col, max(-1.0, min(1.0, 2 * r / r_max - 1))


def one_point(x, y, z, beam=0):
    return PointCloud(np.array([[x, y, z]]), np.array([beam]))


def test_project_single_point_example():
    cfg = SensorConfig(H=128, W=1024, r_max=120.0)
    img = project(one_point(10.0, 0.0, 0.0, beam=5), cfg)
    col, d = _scalar_bin(10.0, 0.0, 0.0, 1024, 120.0)
    assert col == 512 and d == pytest.approx(-5 / 6)
    assert img.depth[5, 512] == np.float32(-5 / 6)
    assert np.count_nonzero(img.valid) == 1


def test_nearest_point_wins_collision():
    cfg = SensorConfig(H=4, W=16, r_max=120.0)
    cloud = PointCloud(np.array([[50.0, 1.0, 0.0], [5.0, 0.1, 0.0]]), np.array([2, 2]))
    img = project(cloud, cfg)
    assert img.depth[img.valid].tolist() == [np.float32(2 * math.hypot(5.0, 0.1) / 120 - 1)]


def test_collision_tie_keeps_first():
    cfg = SensorConfig(H=2, W=8, r_max=10.0)
    cloud = PointCloud(np.array([[3.0, 0.0, 0.0], [3.0, 0.0, 0.0]]), np.array([0, 0]))
    assert np.count_nonzero(project(cloud, cfg).valid) == 1


def test_far_point_clamps():
    cfg = SensorConfig(H=2, W=8, r_max=10.0)
    assert project(one_point(200.0, 0, 0), cfg).depth.max() == 1.0


def test_beam_id_out_of_range():
    with pytest.raises(CodecError):
        project(one_point(1, 0, 0, beam=4), SensorConfig(H=4, W=8))


def test_empty_cloud_all_sentinel():
    img = project(PointCloud.empty(), SensorConfig.toy())
    assert np.all(img.depth == -1)
    assert len(unproject(img, SensorConfig.toy())) == 0


def test_unproject_full_half_range_image():
    cfg = SensorConfig.toy()
    img = RangeImage(np.zeros((32, 64)), cfg.r_max)
    cloud = unproject(img, cfg)
    assert len(cloud) == 32 * 64
    np.testing.assert_allclose(cloud.ranges, cfg.r_max / 2, rtol=1e-12)


def test_unproject_needs_elevations_in_beam_mode():
    with pytest.raises(CodecError):
        unproject(RangeImage(np.zeros((4, 8)), 10.0), SensorConfig(H=4, W=8))


def test_depth_of():
    img = RangeImage(np.array([[-1.0, 1.0, 0.0]]), 120.0)
    depth, valid = depth_of(img)
    assert depth.tolist() == [[0.0, 120.0, 60.0]]
    assert valid.tolist() == [[False, True, True]]


def _bin_cloud(cfg, rng, n):
    """n points, one per distinct (row, col) bin, at the row elevation and random azimuth."""
    flat = rng.choice(cfg.H * cfg.W, size=n, replace=False)
    rows, cols = flat // cfg.W, flat % cfg.W
    bin_w = 2 * math.pi / cfg.W
    theta = -math.pi + (cols + rng.uniform(0.01, 0.99, n)) * bin_w
    phi = cfg.row_elevations()[rows]
    r = rng.uniform(1.0, cfg.r_max * 0.99, n)
    pts = np.stack([r * np.cos(phi) * np.cos(theta), r * np.cos(phi) * np.sin(theta), r * np.sin(phi)], 1)
    return PointCloud(pts, rows), r, theta


@pytest.mark.parametrize("seed", range(3))
def test_round_trip_bounds(seed):
    cfg = SensorConfig.toy(W=1024)
    cloud, r, theta = _bin_cloud(cfg, np.random.default_rng(seed), 1000)
    back = unproject(project(cloud, cfg), cfg)
    # match by (row, col): unprojection emits pixels in row-major order
    order = np.lexsort((np.floor((theta + math.pi) / (2 * math.pi) * cfg.W), cloud.beam))
    np.testing.assert_array_less(np.abs(back.ranges - r[order]), cfg.r_max * 1e-6)
    back_theta = np.arctan2(back.points[:, 1], back.points[:, 0])
    dtheta = np.abs(np.angle(np.exp(1j * (back_theta - theta[order]))))
    assert np.all(dtheta <= math.pi / cfg.W)


def test_uniform_mode_rows_and_round_trip():
    cfg = SensorConfig(H=8, W=32, r_max=50.0, mode="uniform",
                       phi_min=math.radians(-20), phi_max=math.radians(20))
    phi = math.radians(-20 + 5 * 2.5)  # center of bin 2
    img = project(one_point(10 * math.cos(phi), 0, 10 * math.sin(phi), beam=99), cfg)
    assert img.valid[2].any()
    back = unproject(img, cfg)
    assert math.asin(back.points[0, 2] / back.ranges[0]) == pytest.approx(phi)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_project_unproject_idempotent(seed):
    cfg = SensorConfig.toy()
    rng = np.random.default_rng(seed)
    img = RangeImage(rng.uniform(-0.99, 1.0, size=(cfg.H, cfg.W)), cfg.r_max)
    again = project(unproject(img, cfg), cfg)
    np.testing.assert_array_max_ulp(again.depth, img.depth, maxulp=1)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.5, 100.0), st.floats(0.0, 50.0))
def test_depth_monotone_in_range(r, extra):
    cfg = SensorConfig(H=1, W=8, r_max=120.0)
    d1 = project(one_point(r, 0.0, 0.0), cfg).depth.max()
    d2 = project(one_point(r + extra, 0.0, 0.0), cfg).depth.max()
    assert d2 >= d1


def test_file_round_trips(tmp_path):
    cfg = SensorConfig.toy()
    rng = np.random.default_rng(0)
    cloud, _, _ = _bin_cloud(cfg, rng, 50)
    write_lpc(tmp_path / "a.lpc", cloud)
    raw = (tmp_path / "a.lpc").read_bytes()
    assert raw[:4] == b"LPC1" and len(raw) == 8 + 50 * 16
    back = read_lpc(tmp_path / "a.lpc")
    np.testing.assert_allclose(back.points, cloud.points, rtol=1e-6)
    assert back.beam.tolist() == cloud.beam.tolist()
    img = project(cloud, cfg)
    write_rimg(tmp_path / "a.rimg", img)
    raw = (tmp_path / "a.rimg").read_bytes()
    assert raw[:4] == b"RIM1" and len(raw) == 16 + 4 * 32 * 64
    assert np.array_equal(read_rimg(tmp_path / "a.rimg").depth, img.depth)


def test_pgm_export(tmp_path):
    depth = np.full((2, 3), -1.0, dtype=np.float32)
    depth[0, 1] = 1.0
    depth[1, 2] = 0.0
    img = RangeImage(depth, 120.0)
    write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw[:11] == b"P5\n3 2\n255\n"
    px = read_pgm(tmp_path / "a.pgm")
    assert px.tolist() == [[0, 255, 0], [0, 0, 128]]
    assert pgm_bytes(RangeImage.blank(4, 4, 1.0))[-16:] == bytes(16)
