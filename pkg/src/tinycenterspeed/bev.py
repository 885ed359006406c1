"""BEV rasterization of sparse scans, Gaussian targets and augmentations.

Grid convention: the ego sits at the midpoint of the left image edge.
Cell ``(i, j)`` covers ``x in [i*p, (i+1)*p)`` and
``y in [(j - k/2)*p, (j - k/2 + 1)*p)``, so ``i`` runs forward and ``j``
runs laterally (left positive).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .domain import LidarScan, OppState, wrap_angle


class ShapeMismatch(ValueError):
    pass


class OutOfFov(ValueError):
    pass


@dataclass(frozen=True)
class BevConfig:
    k: int = 64
    p: float = 0.1
    sigma_gt: float = 2.0

    def __post_init__(self):
        if self.k < 8 or self.k % 2:
            raise ValueError("k must be even and >= 8")
        if self.p <= 0 or self.sigma_gt <= 0:
            raise ValueError("p and sigma_gt must be positive")

    @property
    def fov_area(self) -> float:
        return (self.k * self.p) ** 2

    def to_pixel(self, x, y):
        """Continuous pixel coordinates; cell centres sit at integers."""
        return np.asarray(x) / self.p - 0.5, np.asarray(y) / self.p + self.k / 2 - 0.5

    def to_metric(self, u, v):
        return (np.asarray(u) + 0.5) * self.p, (np.asarray(v) - self.k / 2 + 0.5) * self.p

    def in_fov(self, x: float, y: float) -> bool:
        half = self.k * self.p / 2
        return 0.0 <= x < self.k * self.p and -half <= y < half


@dataclass(frozen=True)
class BevFrame:
    occupancy: np.ndarray
    intensity: np.ndarray
    density: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.occupancy, self.intensity, self.density])


@dataclass(frozen=True)
class HeatmapSet:
    pos: np.ndarray
    v_x: np.ndarray
    v_y: np.ndarray
    yaw: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.pos, self.v_x, self.v_y, self.yaw])

    @classmethod
    def from_array(cls, a: np.ndarray) -> "HeatmapSet":
        if a.ndim != 3 or a.shape[0] != 4:
            raise ShapeMismatch(f"expected (4, k, k), got {a.shape}")
        return cls(a[0], a[1], a[2], a[3])


def rasterize(scan: LidarScan, cfg: BevConfig) -> BevFrame:
    k = cfg.k
    occ = np.zeros((k, k))
    inten = np.zeros((k, k))
    dens = np.zeros((k, k))
    if len(scan):
        xy = scan.points()
        i = np.floor(xy[:, 0] / cfg.p).astype(np.int64)
        j = np.floor(xy[:, 1] / cfg.p).astype(np.int64) + k // 2
        keep = (i >= 0) & (i < k) & (j >= 0) & (j < k)
        if keep.any():
            flat = i[keep] * k + j[keep]
            counts = np.bincount(flat, minlength=k * k).astype(np.float64)
            dens = (counts / counts.max()).reshape(k, k)
            occ = (counts > 0).astype(np.float64).reshape(k, k)
            imax = np.zeros(k * k)
            np.maximum.at(imax, flat, scan.intensities[keep])
            top = imax.max()
            if top > 0:
                inten = np.clip(imax / top, 0.0, 1.0).reshape(k, k)
    return BevFrame(occ, inten, dens)


def stack(prev: BevFrame, curr: BevFrame) -> np.ndarray:
    """Two frames as a (6, k, k) input, older frame first."""
    a, b = prev.as_array(), curr.as_array()
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    return np.concatenate([a, b])


def make_targets(opps: Sequence[OppState], cfg: BevConfig) -> tuple[HeatmapSet, int]:
    """Draw one Gaussian per opponent into the four target channels.

    The kernel is centred on the continuous keypoint and rescaled so the
    nearest cell centre carries exactly ``A``; cells are owned by their
    nearest keypoint. Returns the heatmaps and the number of opponents
    skipped for lying outside the grid.
    """
    k = cfg.k
    out = np.zeros((4, k, k))
    best = np.full((k, k), np.inf)
    ii, jj = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    skipped = 0
    for o in opps:
        if not cfg.in_fov(o.x, o.y):
            skipped += 1
            continue
        u, v = cfg.to_pixel(o.x, o.y)
        d2 = (ii - u) ** 2 + (jj - v) ** 2
        d2_peak = (round_half_up(u) - u) ** 2 + (round_half_up(v) - v) ** 2
        g = np.exp(-(d2 - d2_peak) / (2.0 * cfg.sigma_gt**2))
        own = d2 < best
        best = np.where(own, d2, best)
        for c, amp in enumerate((1.0, o.v_x, o.v_y, o.theta)):
            out[c][own] = amp * g[own]
    out[0] = np.clip(out[0], 0.0, 1.0)
    return HeatmapSet.from_array(out), skipped


def round_half_up(x: float) -> float:
    return math.floor(x + 0.5)


def flip_x(inp: np.ndarray, targets: HeatmapSet, opps: Sequence[OppState]):
    """Mirror the sample across the x axis (y -> -y)."""
    flipped = inp[:, :, ::-1].copy()
    t = targets.as_array()[:, :, ::-1].copy()
    t[2] *= -1.0
    t[3] *= -1.0
    new_opps = [OppState(o.x, -o.y, o.v_x, -o.v_y, wrap_angle(-o.theta)) for o in opps]
    return flipped, HeatmapSet.from_array(t), new_opps


def rotate(scan: LidarScan, opps: Sequence[OppState], phi: float):
    """Rotate a scan and its opponents by ``phi`` about the sensor origin."""
    if abs(phi) > math.pi / 4 + 1e-12:
        raise ValueError("rotation augmentation is limited to |phi| <= pi/4")
    c, s = math.cos(phi), math.sin(phi)
    rotated = LidarScan(scan.angles + phi, scan.ranges, scan.intensities, scan.timestamp)
    new_opps = [
        OppState(c * o.x - s * o.y, s * o.x + c * o.y, c * o.v_x - s * o.v_y, s * o.v_x + c * o.v_y,
                 wrap_angle(o.theta + phi))
        for o in opps
    ]
    return rotated, new_opps


def frame_pair(length: int, t: int, skip: bool) -> tuple[int, int]:
    """Indices of the two frames stacked for sample ``t``.

    With ``skip`` the older frame is ``t - 2`` and velocity labels double.
    """
    lag = 2 if skip else 1
    if t - lag < 0 or t >= length:
        raise IndexError(f"frames {t - lag} and {t} not both in a sequence of length {length}")
    return t - lag, t


def frame_skip(scans: Sequence[LidarScan], opps_per_frame: Sequence[Sequence[OppState]], t: int,
               cfg: BevConfig):
    """Input built from frames t-2 and t, with velocity labels doubled."""
    a, b = frame_pair(len(scans), t, skip=True)
    inp = stack(rasterize(scans[a], cfg), rasterize(scans[b], cfg))
    return inp, double_velocity(opps_per_frame[b])


def double_velocity(opps: Sequence[OppState]) -> list[OppState]:
    return [OppState(o.x, o.y, 2.0 * o.v_x, 2.0 * o.v_y, o.theta) for o in opps]
