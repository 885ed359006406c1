"""Geometric value types, ego-frame transforms and Frenet conversion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class PointTooFar(ValueError):
    """Raised when a point lies farther than ``d_max`` from the reference line."""


class OutOfRange(ValueError):
    """Raised when a Frenet ``s`` lies outside the reference line."""


def wrap_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    w = math.fmod(a + math.pi, 2.0 * math.pi)
    if w <= 0.0:
        w += 2.0 * math.pi
    return w - math.pi


@dataclass(frozen=True)
class LidarScan:
    """One sparse 2D LiDAR sweep in the sensor frame.

    Beams without a return are simply absent, so ``angles`` is not
    necessarily evenly spaced.
    """

    angles: np.ndarray
    ranges: np.ndarray
    intensities: np.ndarray
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("angles", "ranges", "intensities"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        n = len(self.angles)
        if len(self.ranges) != n or len(self.intensities) != n:
            raise ValueError("angles, ranges and intensities must have equal length")
        if n and np.any(self.ranges <= 0):
            raise ValueError("ranges must be positive")

    def __len__(self) -> int:
        return len(self.angles)

    def points(self) -> np.ndarray:
        """Cartesian (x, y) of every return, shape (n, 2)."""
        return np.stack([self.ranges * np.cos(self.angles), self.ranges * np.sin(self.angles)], axis=1)

    @classmethod
    def from_points(cls, xy: np.ndarray, intensities, timestamp: float = 0.0) -> "LidarScan":
        xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
        angles = np.arctan2(xy[:, 1], xy[:, 0])
        ranges = np.hypot(xy[:, 0], xy[:, 1])
        order = np.argsort(angles, kind="stable")
        return cls(angles[order], ranges[order], np.asarray(intensities, dtype=np.float64)[order], timestamp)


@dataclass(frozen=True)
class EgoState:
    x: float
    y: float
    theta: float


@dataclass(frozen=True)
class OppState:
    x: float
    y: float
    v_x: float
    v_y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v_x, self.v_y, self.theta])


@dataclass(frozen=True)
class FrenetState:
    s: float
    d: float
    v_s: float
    v_d: float


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    v_x: float = 0.0
    v_y: float = 0.0
    theta: float = 0.0
    score: float = 1.0


def _rotate(x: float, y: float, angle: float) -> tuple[float, float]:
    c, s = math.cos(angle), math.sin(angle)
    return c * x - s * y, s * x + c * y


def global_to_local(opp: OppState, ego: EgoState) -> OppState:
    """Express an opponent state in the ego frame (ego at origin, facing +x)."""
    x, y = _rotate(opp.x - ego.x, opp.y - ego.y, -ego.theta)
    vx, vy = _rotate(opp.v_x, opp.v_y, -ego.theta)
    return OppState(x, y, vx, vy, wrap_angle(opp.theta - ego.theta))


def local_to_global(opp: OppState, ego: EgoState) -> OppState:
    """Inverse of :func:`global_to_local`."""
    x, y = _rotate(opp.x, opp.y, ego.theta)
    vx, vy = _rotate(opp.v_x, opp.v_y, ego.theta)
    return OppState(x + ego.x, y + ego.y, vx, vy, wrap_angle(opp.theta + ego.theta))


def detection_to_global(det: Detection, ego: EgoState) -> Detection:
    g = local_to_global(OppState(det.x, det.y, det.v_x, det.v_y, det.theta), ego)
    return Detection(g.x, g.y, g.v_x, g.v_y, g.theta, det.score)


@dataclass(frozen=True)
class ReferenceLine:
    """Piecewise-linear reference polyline with cumulative arclength.

    A line whose last waypoint coincides with its first is treated as a
    closed loop by :meth:`s_difference`; ``s`` itself never wraps.
    """

    waypoints: np.ndarray
    d_max: float = 5.0
    cumulative_s: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        wp = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if len(wp) < 2:
            raise ValueError("reference line needs at least 2 waypoints")
        seg = np.diff(wp, axis=0)
        lengths = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(lengths <= 0):
            raise ValueError("consecutive waypoints must be distinct")
        object.__setattr__(self, "waypoints", wp)
        object.__setattr__(self, "cumulative_s", np.concatenate([[0.0], np.cumsum(lengths)]))

    @property
    def length(self) -> float:
        return float(self.cumulative_s[-1])

    @property
    def closed(self) -> bool:
        return bool(np.allclose(self.waypoints[0], self.waypoints[-1], atol=1e-9))

    def s_difference(self, s_a: float, s_b: float) -> float:
        """``s_a - s_b``, taking the short way round on closed lines."""
        ds = s_a - s_b
        if self.closed:
            L = self.length
            ds = (ds + 0.5 * L) % L - 0.5 * L
        return ds

    def _tangents(self) -> np.ndarray:
        seg = np.diff(self.waypoints, axis=0)
        return seg / np.diff(self.cumulative_s)[:, None]

    def project(self, x: float, y: float) -> tuple[int, float, float]:
        """Closest segment index, its parameter u in [0, 1] and the distance."""
        a = self.waypoints[:-1]
        seg = np.diff(self.waypoints, axis=0)
        seg_len2 = np.einsum("ij,ij->i", seg, seg)
        rel = np.array([x, y]) - a
        u = np.clip(np.einsum("ij,ij->i", rel, seg) / seg_len2, 0.0, 1.0)
        diff = rel - u[:, None] * seg
        dist = np.hypot(diff[:, 0], diff[:, 1])
        # argmin returns the first minimum, i.e. the lower s on ties
        i = int(np.argmin(dist))
        return i, float(u[i]), float(dist[i])


def cartesian_to_frenet(x: float, y: float, v_x: float, v_y: float, ref: ReferenceLine) -> FrenetState:
    i, u, dist = ref.project(x, y)
    if dist > ref.d_max:
        raise PointTooFar(f"point ({x:.3f}, {y:.3f}) is {dist:.3f} m from the reference line")
    seg_len = ref.cumulative_s[i + 1] - ref.cumulative_s[i]
    tx, ty = ref._tangents()[i]
    a = ref.waypoints[i]
    px, py = x - (a[0] + u * tx * seg_len), y - (a[1] + u * ty * seg_len)
    d = tx * py - ty * px
    return FrenetState(
        s=float(ref.cumulative_s[i] + u * seg_len),
        d=float(d),
        v_s=float(v_x * tx + v_y * ty),
        v_d=float(-v_x * ty + v_y * tx),
    )


def frenet_to_cartesian(f: FrenetState, ref: ReferenceLine) -> tuple[float, float]:
    if not (0.0 <= f.s <= ref.length):
        raise OutOfRange(f"s={f.s} outside [0, {ref.length}]")
    i = int(np.searchsorted(ref.cumulative_s, f.s, side="right")) - 1
    i = min(max(i, 0), len(ref.waypoints) - 2)
    tx, ty = ref._tangents()[i]
    a = ref.waypoints[i]
    ds = f.s - ref.cumulative_s[i]
    return float(a[0] + ds * tx - f.d * ty), float(a[1] + ds * ty + f.d * tx)


def closed_polyline(points: Sequence[Sequence[float]]) -> np.ndarray:
    """Append the first point so that a loop forms a closed reference line."""
    pts = np.asarray(points, dtype=np.float64)
    if not np.allclose(pts[0], pts[-1]):
        pts = np.vstack([pts, pts[:1]])
    return pts
