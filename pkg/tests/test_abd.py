import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinycenterspeed import abd
from tinycenterspeed.abd import AbdConfig, DegenerateScan, breakpoint_threshold, detect, extent, segment
from tinycenterspeed.domain import LidarScan
from tinycenterspeed.sim import LidarModel, cast_rays, car_rectangle

CFG = AbdConfig()


def scan_of(xy):
    return LidarScan.from_points(np.asarray(xy, dtype=float), np.ones(len(xy)))


def test_gross_gap_is_a_breakpoint():
    dphi = math.radians(0.25)
    assert breakpoint_threshold(1.0, dphi, CFG) < 0.1
    xy = [[1.0, 0.0], [math.cos(dphi), math.sin(dphi)]]
    far = [[3.0 * math.cos(2 * dphi), 3.0 * math.sin(2 * dphi)]]
    # points 2 m apart in range end up in different runs
    scan = scan_of(xy + far)
    gaps = np.hypot(*np.diff(scan.points(), axis=0).T)
    thr = breakpoint_threshold(scan.ranges[:-1], np.diff(scan.angles), CFG)
    assert list(gaps > thr) == [False, True]


def test_threshold_formula():
    dphi = math.radians(1.0)
    expected = 2.0 * math.sin(dphi) / math.sin(CFG.lam - dphi) + 3 * CFG.sigma_r
    assert breakpoint_threshold(2.0, dphi, CFG) == pytest.approx(expected)
    assert breakpoint_threshold(2.0, CFG.lam, CFG) == 0.0


def test_smooth_arc_is_one_cluster():
    ang = np.radians(np.arange(-60, 60, 0.25))
    r = 2.0 + 0.3 * np.sin(ang)
    scan = LidarScan(ang, r, np.ones_like(ang))
    # oracle: every consecutive gap under its own adaptive threshold
    gaps = np.hypot(*np.diff(scan.points(), axis=0).T)
    assert np.all(gaps <= breakpoint_threshold(r[:-1], np.diff(ang), CFG))
    assert len(segment(scan, CFG)) == 1


def test_too_few_points():
    assert segment(scan_of([[1, 0], [1, 0.01]]), CFG) == []
    with pytest.raises(DegenerateScan):
        segment(scan_of([[1, 0]]), CFG)
    assert abd.run(scan_of([[1, 0]])) == []


def test_detect_filters_and_empty():
    wall = np.column_stack([np.full(30, 2.0), np.linspace(-1, 1, 30)])
    assert extent(wall) == pytest.approx(2.0)
    assert detect([wall], CFG) == []
    assert detect([], CFG) == []
    small = np.array([[2.0, -0.1], [1.95, 0.0], [2.0, 0.1]])
    (d,) = detect([small], CFG)
    assert (d.v_x, d.v_y, d.theta, d.score) == (0.0, 0.0, 0.0, 1.0)


def car_scan(x, y, heading=0.0):
    lidar = LidarModel()
    ang = lidar.beam_angle(np.arange(lidar.beams))
    ranges, _ = cast_rays((0.0, 0.0), ang, car_rectangle(x, y, heading, 0.5, 0.3))
    keep = np.isfinite(ranges)
    return LidarScan(ang[keep], ranges[keep], np.ones(keep.sum()))


def test_car_front_face_detection_near_centre():
    dets = abd.run(car_scan(2.0, 0.0))
    assert len(dets) == 1
    assert math.hypot(dets[0].x - 2.0, dets[0].y) < 0.1


@given(st.floats(-math.pi, math.pi))
def test_segmentation_is_rotation_invariant(phi):
    ang = np.radians(np.arange(-40, 40, 0.5))
    r = np.where(np.abs(ang) < 0.1, 1.5, 3.0)
    base = segment(LidarScan(ang, r, np.ones_like(ang)), CFG)
    rot = segment(LidarScan(ang + phi, r, np.ones_like(ang)), CFG)
    assert len(base) == len(rot)
    c, s = math.cos(phi), math.sin(phi)
    for a, b in zip(base, rot):
        assert np.allclose(a @ np.array([[c, s], [-s, c]]), b, atol=1e-9)


@given(st.integers(0, 2**32 - 1))
def test_detections_come_from_valid_clusters(seed):
    r = np.random.default_rng(seed)
    ang = np.sort(r.uniform(-2, 2, 200))
    ranges = np.repeat(r.uniform(0.5, 5, 20), 10) + r.normal(scale=0.01, size=200)
    scan = LidarScan(ang, ranges, np.ones(200))
    clusters = segment(scan, CFG)
    assert all(len(c) >= CFG.min_points for c in clusters)
    valid = [c for c in clusters if extent(c) <= CFG.max_object_size]
    assert len(abd.run(scan, CFG)) == len(valid)
