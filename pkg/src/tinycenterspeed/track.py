"""Constant-velocity Kalman filter and a small multi-object tracker."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .decode import match
from .domain import Detection


class NonPositiveDt(ValueError):
    pass


class OutsideGate(ValueError):
    pass


class NonMonotoneTime(ValueError):
    pass


@dataclass(frozen=True)
class KfConfig:
    q_pos: float = 0.1
    q_vel: float = 40.0
    r_pos: float = 0.05
    r_vel: float = 0.3
    gate: float = 1.0
    max_misses: int = 12
    init_vel_std: float = 2.0

    def __post_init__(self):
        for name in ("q_pos", "q_vel", "r_pos", "r_vel", "gate", "max_misses", "init_vel_std"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class KfTrack:
    state: np.ndarray  # [x, y, v_x, v_y]
    covariance: np.ndarray
    last_update: float
    id: int
    age: int = 1
    misses: int = 0

    def as_detection(self) -> Detection:
        x, y, vx, vy = self.state
        return Detection(float(x), float(y), float(vx), float(vy), float(np.arctan2(vy, vx)), 1.0)


def transition(dt: float) -> np.ndarray:
    F = np.eye(4)
    F[0, 2] = F[1, 3] = dt
    return F


def process_noise(dt: float, cfg: KfConfig) -> np.ndarray:
    """Piecewise white acceleration noise plus a small random-walk term on position."""
    q = np.zeros((4, 4))
    for p, v in ((0, 2), (1, 3)):
        q[p, p] = cfg.q_vel * dt**4 / 4 + cfg.q_pos * dt
        q[p, v] = q[v, p] = cfg.q_vel * dt**3 / 2
        q[v, v] = cfg.q_vel * dt**2
    return q


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def new_track(det: Detection, t: float, track_id: int, cfg: KfConfig, use_velocity: bool) -> KfTrack:
    if use_velocity:
        state = np.array([det.x, det.y, det.v_x, det.v_y])
        var_v = cfg.r_vel**2
    else:
        state = np.array([det.x, det.y, 0.0, 0.0])
        var_v = cfg.init_vel_std**2
    P = np.diag([cfg.r_pos**2, cfg.r_pos**2, var_v, var_v])
    return KfTrack(state, P, t, track_id)


def predict(track: KfTrack, dt: float, cfg: KfConfig) -> KfTrack:
    if dt <= 0:
        raise NonPositiveDt(f"dt must be positive, got {dt}")
    F = transition(dt)
    P = _symmetrize(F @ track.covariance @ F.T + process_noise(dt, cfg))
    return replace(track, state=F @ track.state, covariance=P)


def update(track: KfTrack, det: Detection, cfg: KfConfig, use_velocity: bool = False,
           r_pos: float | None = None) -> KfTrack:
    """Measurement update with (x, y) or, when ``use_velocity``, (x, y, v_x, v_y)."""
    dist = float(np.hypot(det.x - track.state[0], det.y - track.state[1]))
    if dist > cfg.gate:
        raise OutsideGate(f"detection {dist:.3f} m from prediction exceeds gate {cfg.gate}")
    r_pos = cfg.r_pos if r_pos is None else r_pos
    if use_velocity:
        H = np.eye(4)
        z = np.array([det.x, det.y, det.v_x, det.v_y])
        R = np.diag([r_pos**2, r_pos**2, cfg.r_vel**2, cfg.r_vel**2])
    else:
        H = np.eye(2, 4)
        z = np.array([det.x, det.y])
        R = np.eye(2) * r_pos**2
    P = track.covariance
    S = H @ P @ H.T + R
    K = np.linalg.solve(S, H @ P).T
    x = track.state + K @ (z - H @ track.state)
    # Joseph form keeps P positive semi-definite
    I_KH = np.eye(4) - K @ H
    P = _symmetrize(I_KH @ P @ I_KH.T + K @ R @ K.T)
    return replace(track, state=x, covariance=P, age=track.age + 1, misses=0)


class Tracker:
    """Predict / associate / update / spawn / retire over a stream of frames."""

    def __init__(self, cfg: KfConfig = KfConfig(), use_velocity: bool = False):
        self.cfg = cfg
        self.use_velocity = use_velocity
        self.tracks: list[KfTrack] = []
        self.t: float | None = None
        self._next_id = 0

    def step(self, dets: list[Detection], t: float) -> list[KfTrack]:
        if self.t is not None and t <= self.t:
            raise NonMonotoneTime(f"time went from {self.t} to {t}")
        if self.t is not None:
            self.tracks = [predict(tr, t - self.t, self.cfg) for tr in self.tracks]
        self.t = t
        predicted = [tr.as_detection() for tr in self.tracks]
        result = match(dets, predicted, self.cfg.gate)
        updated = {}
        for det, pred in result.pairs:
            i = next(n for n, p in enumerate(predicted) if p is pred)
            updated[i] = replace(update(self.tracks[i], det, self.cfg, self.use_velocity), last_update=t)
        survivors = []
        for i, tr in enumerate(self.tracks):
            if i in updated:
                survivors.append(updated[i])
            else:
                tr = replace(tr, misses=tr.misses + 1)
                if tr.misses <= self.cfg.max_misses:
                    survivors.append(tr)
        for det in result.unmatched_dets:
            survivors.append(new_track(det, t, self._next_id, self.cfg, self.use_velocity))
            self._next_id += 1
        self.tracks = survivors
        return list(self.tracks)
