import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tinycenterspeed.domain import Detection
from tinycenterspeed.track import (KfConfig, NonMonotoneTime, NonPositiveDt, OutsideGate, Tracker, new_track, predict,
                                   update)

CFG = KfConfig()


def track_at(x, y, vx=0.0, vy=0.0, cfg=CFG):
    return new_track(Detection(x, y, vx, vy), 0.0, 0, cfg, use_velocity=True)


def test_predict_moves_at_constant_velocity():
    tr = predict(track_at(0, 0, 1, 0), 0.04, CFG)
    assert tr.state[:2] == pytest.approx([0.04, 0.0])


def test_predict_zero_velocity_grows_covariance():
    tr = track_at(1, 2)
    out = predict(tr, 0.1, CFG)
    assert out.state[:2] == pytest.approx([1, 2])
    assert np.trace(out.covariance) > np.trace(tr.covariance)
    with pytest.raises(NonPositiveDt):
        predict(tr, 0.0, CFG)


def test_exact_measurement_limit():
    tr = predict(track_at(0, 0, 1, 0), 0.04, CFG)
    out = update(tr, Detection(0.1, 0.05), CFG, r_pos=1e-9)
    assert out.state[:2] == pytest.approx([0.1, 0.05], abs=1e-9)


def test_outside_gate():
    with pytest.raises(OutsideGate):
        update(track_at(0, 0), Detection(2.0, 0.0), CFG)


def run_position_only(truth, noise, seed=0, dt=0.04):
    r = np.random.default_rng(seed)
    tr = None
    for n, (x, y) in enumerate(truth):
        det = Detection(x + r.normal(scale=noise), y + r.normal(scale=noise))
        if tr is None:
            tr = new_track(det, 0.0, 0, CFG, use_velocity=False)
        else:
            tr = update(predict(tr, dt, CFG), det, CFG)
    return tr


def test_velocity_recovered_from_positions():
    truth = [(0.04 * n, 0.0) for n in range(51)]
    tr = run_position_only(truth, noise=0.01)
    assert abs(tr.state[2] - 1.0) < 0.05
    assert abs(tr.state[3]) < 0.05


def test_stationary_velocity_within_three_sigma():
    tr = run_position_only([(1.0, -0.5)] * 200, noise=CFG.r_pos, seed=3)
    sd = np.sqrt(np.diag(tr.covariance)[2:])
    assert np.all(np.abs(tr.state[2:]) <= 3 * sd)


def test_noiseless_position_error_decreases_after_burn_in():
    tr = None
    errors = []
    for n in range(80):
        x, y = 0.5 + 2.0 * 0.04 * n, 0.2 - 0.5 * 0.04 * n
        if tr is None:
            tr = new_track(Detection(x, y), 0.0, 0, CFG, use_velocity=False)
            continue
        tr = predict(tr, 0.04, CFG)
        errors.append(np.hypot(tr.state[0] - x, tr.state[1] - y))
        tr = update(tr, Detection(x, y), CFG, r_pos=1e-6)
    tail = errors[10:]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
    assert tail[-1] < tail[0] / 5


@given(st.lists(st.tuples(st.floats(0.001, 0.5), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3),
                          st.floats(-3, 3), st.floats(-3, 3), st.booleans()), min_size=1, max_size=30))
def test_covariance_stays_symmetric_psd(steps):
    tr = track_at(0, 0)
    for dt, dx, dy, vx, vy, use_vel in steps:
        tr = predict(tr, dt, CFG)
        tr = update(tr, Detection(tr.state[0] + dx, tr.state[1] + dy, vx, vy), CFG, use_velocity=use_vel)
        P = tr.covariance
        assert np.abs(P - P.T).max() < 1e-9
        assert np.linalg.eigvalsh(P).min() > -1e-12


def test_config_validation():
    with pytest.raises(ValueError):
        KfConfig(r_pos=0)


def test_tracker_lifecycle():
    tk = Tracker()
    assert len(tk.step([Detection(1, 1)], 0.0)) == 1
    for n in range(CFG.max_misses):
        assert len(tk.step([], 0.04 * (n + 1))) == 1
    assert tk.step([], 0.04 * (CFG.max_misses + 1)) == []
    with pytest.raises(NonMonotoneTime):
        tk.step([], 0.0)


def test_two_objects_keep_their_ids():
    tk = Tracker()
    r = np.random.default_rng(0)
    ids = None
    for n in range(100):
        t = 0.04 * n
        a = Detection(1.0 + t, 1.0 + r.normal(scale=0.02))
        b = Detection(3.0 - 0.5 * t, -1.0 + r.normal(scale=0.02))
        tracks = tk.step([a, b], t)
        assert len(tracks) == 2
        by_side = {tr.id: tr.state[1] > 0 for tr in tracks}
        if ids is None:
            ids = by_side
        assert by_side == ids


def test_velocity_mode_uses_detector_velocity():
    tk = Tracker(use_velocity=True)
    tk.step([Detection(1, 0, 2.0, 0.5)], 0.0)
    assert tk.tracks[0].state[2:] == pytest.approx([2.0, 0.5])
