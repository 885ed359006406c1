import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinycenterspeed.bev import (BevConfig, BevFrame, HeatmapSet, ShapeMismatch, double_velocity, flip_x,
                                 frame_pair, frame_skip, make_targets, rasterize, rotate, stack)
from tinycenterspeed.decode import DecodeConfig, decode
from tinycenterspeed.domain import LidarScan, OppState

CFG = BevConfig()


def scan_of(points, intensities=None):
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    inten = np.full(len(pts), 0.5) if intensities is None else intensities
    return LidarScan.from_points(pts, inten)


def test_config_validation():
    for bad in (dict(k=6), dict(k=63), dict(p=0), dict(sigma_gt=-1)):
        with pytest.raises(ValueError):
            BevConfig(**bad)
    assert CFG.fov_area == pytest.approx(6.4**2)


def test_grid_rule_example():
    frame = rasterize(scan_of([[1.0, 0.0]]), CFG)
    assert frame.occupancy[10, 32] == 1
    assert frame.occupancy.sum() == 1


def test_grid_rule_edges():
    cfg = BevConfig(k=8, p=0.5)
    # y just left of centre lands in the first column left of the ego row
    frame = rasterize(scan_of([[0.01, 0.01], [0.01, -0.01], [3.99, 1.99], [3.99, -1.99]]), cfg)
    assert frame.occupancy[0, 4] == 1 and frame.occupancy[0, 3] == 1
    assert frame.occupancy[7, 7] == 1 and frame.occupancy[7, 0] == 1
    dropped = rasterize(scan_of([[-0.1, 0.0], [4.0, 0.0], [1.0, 2.0]]), cfg)
    assert dropped.occupancy.sum() == 0


def test_empty_region_is_all_zero():
    frame = rasterize(scan_of([[-3.0, 0.0]]), CFG)
    assert not frame.as_array().any()


def test_density_normalisation():
    pts = [[1.01, 0.01], [1.02, 0.02], [1.03, 0.03], [2.05, 0.05]]
    frame = rasterize(scan_of(pts), CFG)
    assert frame.density[10, 32] == 1.0
    assert frame.density[20, 32] == pytest.approx(1 / 3)


def test_intensity_uses_cell_max_over_frame_max():
    pts = [[1.01, 0.01], [1.02, 0.02], [2.05, 0.05]]
    frame = rasterize(scan_of(pts, np.array([0.2, 0.4, 0.8])), CFG)
    assert frame.intensity[10, 32] == pytest.approx(0.5)
    assert frame.intensity[20, 32] == pytest.approx(1.0)


@given(st.lists(st.tuples(st.floats(-2, 8), st.floats(-5, 5), st.floats(0, 2)), min_size=1, max_size=60))
def test_rasterize_invariants(raw):
    pts = np.array([(x, y) for x, y, _ in raw])
    keep = np.hypot(pts[:, 0], pts[:, 1]) > 1e-6
    if not keep.any():
        return
    frame = rasterize(scan_of(pts[keep], np.array([i for _, _, i in raw])[keep]), CFG)
    assert set(np.unique(frame.occupancy)) <= {0.0, 1.0}
    for ch in (frame.intensity, frame.density):
        assert ch.min() >= 0 and ch.max() <= 1
    assert np.array_equal(frame.density > 0, frame.occupancy == 1)


def test_stack_ordering():
    a = rasterize(scan_of([[1.0, 0.0]]), CFG)
    b = rasterize(scan_of([[2.0, 1.0]]), CFG)
    s = stack(a, b)
    assert s.shape == (6, 64, 64)
    assert np.array_equal(s[3], b.occupancy) and np.array_equal(s[0], a.occupancy)
    same = stack(a, a)
    assert np.array_equal(same[:3], same[3:])
    zero = BevFrame(*np.zeros((3, 64, 64)))
    assert not stack(zero, b)[:3].any()
    with pytest.raises(ShapeMismatch):
        stack(a, BevFrame(*np.zeros((3, 8, 8))))


def cell_centre(i, j, cfg=CFG):
    x, y = cfg.to_metric(i, j)
    return float(x), float(y)


def test_target_at_cell_centre():
    x, y = cell_centre(20, 30)
    h, skipped = make_targets([OppState(x, y, 1.5, -0.5, 0.25)], CFG)
    assert skipped == 0
    assert h.pos[20, 30] == 1.0 and h.v_x[20, 30] == 1.5 and h.v_y[20, 30] == -0.5 and h.yaw[20, 30] == 0.25
    assert h.pos[22, 30] == pytest.approx(math.exp(-0.5))
    assert h.pos[20, 28] == pytest.approx(math.exp(-0.5))


def test_target_off_centre_keeps_peak_at_nearest_cell():
    x, y = cell_centre(20.3, 30.4)
    h, _ = make_targets([OppState(x, y, 2.0, 0, 0)], CFG)
    assert np.unravel_index(np.argmax(h.pos), h.pos.shape) == (20, 30)
    assert h.pos[20, 30] == 1.0 and h.v_x[20, 30] == 2.0


@given(st.floats(0.05, 6.35), st.floats(-3.15, 3.15))
def test_target_monotone_in_distance(x, y):
    h, _ = make_targets([OppState(x, y, 0, 0, 0)], CFG)
    u, v = CFG.to_pixel(x, y)
    ii, jj = np.meshgrid(np.arange(64), np.arange(64), indexing="ij")
    d = np.hypot(ii - u, jj - v).ravel()
    vals = h.pos.ravel()
    order = np.argsort(d, kind="stable")
    dv, vv = d[order], vals[order]
    strictly_farther = np.diff(dv) > 1e-9
    # strictly decreasing until values leave the normal float range
    nonzero = vv[1:] > np.finfo(float).tiny * 1e3
    assert np.all(np.diff(vv)[strictly_farther & nonzero] < 0)
    assert h.pos.max() == 1.0


def test_targets_skip_out_of_fov():
    h, skipped = make_targets([OppState(-1, 0, 0, 0, 0), OppState(2, 5, 0, 0, 0), OppState(2, 0, 1, 0, 0)], CFG)
    assert skipped == 2
    assert h.pos.max() == 1.0


def test_overlap_nearest_keypoint_owns_cells():
    a, b = cell_centre(20, 28), cell_centre(20, 34)
    h, _ = make_targets([OppState(*a, 1.0, 0, 0), OppState(*b, -1.0, 0, 0)], CFG)
    assert np.all(h.v_x[:, :31] >= 0) and np.all(h.v_x[:, 32:] <= 0)
    assert h.v_x[20, 28] == 1.0 and h.v_x[20, 34] == -1.0


def test_flip_example_and_involution():
    inp = np.random.default_rng(0).random((6, 64, 64))
    x, y = cell_centre(10, 40)
    opp = OppState(x, y, 1.0, 0.2, 0.1)
    h, _ = make_targets([opp], CFG)
    f_inp, f_h, f_opps = flip_x(inp, h, [opp])
    assert np.unravel_index(np.argmax(f_h.pos), f_h.pos.shape) == (10, 23)
    assert f_opps[0].as_array() == pytest.approx([x, -y, 1.0, -0.2, -0.1])
    back_inp, back_h, back_opps = flip_x(f_inp, f_h, f_opps)
    assert np.array_equal(back_inp, inp)
    assert np.array_equal(back_h.as_array(), h.as_array())
    assert back_opps[0].as_array() == pytest.approx(opp.as_array())


def test_flip_of_targets_equals_targets_of_flipped_opp():
    opp = OppState(2.34, 0.71, 1.0, 0.3, 0.4)
    h, _ = make_targets([opp], CFG)
    _, f_h, f_opps = flip_x(np.zeros((6, 64, 64)), h, [opp])
    direct, _ = make_targets(f_opps, CFG)
    assert np.allclose(f_h.as_array(), direct.as_array(), atol=1e-12)


def test_rotate_examples():
    scan = scan_of([[1.0, 0.0]])
    same, opps = rotate(scan, [OppState(1, 0, 1, 0, 0)], 0.0)
    assert same.points() == pytest.approx(scan.points())
    r, opps = rotate(scan, [OppState(1, 0, 1, 0, 0)], math.pi / 4)
    assert r.points()[0] == pytest.approx([math.sqrt(2) / 2, math.sqrt(2) / 2])
    assert opps[0].as_array() == pytest.approx([math.sqrt(0.5), math.sqrt(0.5), math.sqrt(0.5), math.sqrt(0.5),
                                                math.pi / 4])
    with pytest.raises(ValueError):
        rotate(scan, [], 1.0)


@given(st.floats(-math.pi / 4, math.pi / 4))
def test_rotate_inverse(phi):
    pts = np.array([[1.0, 0.3], [2.0, -1.0], [4.0, 2.0]])
    scan = scan_of(pts)
    opp = OppState(2.0, 0.5, 1.0, -0.3, 0.2)
    r, o = rotate(scan, [opp], phi)
    back, ob = rotate(r, o, -phi)
    assert np.allclose(back.points(), scan.points(), atol=1e-9)
    assert np.allclose(ob[0].as_array(), opp.as_array(), atol=1e-9)


@given(st.floats(-math.pi / 4, math.pi / 4), st.floats(1.0, 4.0), st.floats(-1.5, 1.5), st.booleans())
def test_augmented_targets_decode_to_augmented_state(phi, x, y, flip):
    opp = OppState(x, y, 1.2, -0.4, 0.3)
    _, (o,) = rotate(scan_of([[1, 0]]), [opp], phi)
    h, _ = make_targets([o], CFG)
    if flip:
        _, h, (o,) = flip_x(np.zeros((6, 64, 64)), h, [o])
    dets = decode(h, DecodeConfig(), CFG)
    assert len(dets) == 1
    assert math.hypot(dets[0].x - o.x, dets[0].y - o.y) <= CFG.p / 2
    assert (dets[0].v_x, dets[0].v_y, dets[0].theta) == pytest.approx((o.v_x, o.v_y, o.theta), abs=1e-9)


def test_frame_skip():
    scans = [scan_of([[1.0 + 0.1 * n, 0.0]]) for n in range(4)]
    opps = [[OppState(1.0, 0.0, 0.5, 0.1, 0.2)] for _ in range(4)]
    inp, doubled = frame_skip(scans, opps, 2, CFG)
    assert np.array_equal(inp[:3], rasterize(scans[0], CFG).as_array())
    assert np.array_equal(inp[3:], rasterize(scans[2], CFG).as_array())
    assert doubled[0].as_array() == pytest.approx([1.0, 0.0, 1.0, 0.2, 0.2])
    assert double_velocity([OppState(1, 2, 0, 0, 0)])[0].as_array().tolist() == [1, 2, 0, 0, 0]
    with pytest.raises(IndexError):
        frame_skip(scans, opps, 1, CFG)
    assert frame_pair(4, 3, False) == (2, 3)
    with pytest.raises(IndexError):
        frame_pair(4, 4, False)


def test_heatmapset_shape_check():
    with pytest.raises(ShapeMismatch):
        HeatmapSet.from_array(np.zeros((3, 8, 8)))
