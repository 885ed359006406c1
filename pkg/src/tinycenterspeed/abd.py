"""Adaptive breakpoint detector: classical scan segmentation baseline.

Consecutive returns ``n-1`` and ``n`` are split when their distance exceeds

    r[n-1] * sin(dphi) / sin(lambda - dphi) + 3 * sigma_r

which grows with range and beam spacing. Small clusters become position-only
detections; velocity has to come from a tracker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .domain import Detection, LidarScan


class DegenerateScan(ValueError):
    pass


@dataclass(frozen=True)
class AbdConfig:
    lam: float = math.radians(10.0)
    sigma_r: float = 0.02
    min_points: int = 3
    max_object_size: float = 0.6
    push_back: float = 0.2

    def __post_init__(self):
        if not 0 < self.lam < math.pi / 2:
            raise ValueError("lambda must lie in (0, pi/2)")
        if self.sigma_r < 0:
            raise ValueError("sigma_r must be >= 0")


def breakpoint_threshold(r_prev, dphi, cfg: AbdConfig):
    dphi = np.asarray(dphi, dtype=np.float64)
    with np.errstate(divide="ignore"):
        thr = np.asarray(r_prev) * np.sin(dphi) / np.sin(cfg.lam - dphi) + 3 * cfg.sigma_r
    # beyond lambda the adaptive bound is meaningless: always split
    return np.where(dphi >= cfg.lam, 0.0, thr)


def segment(scan: LidarScan, cfg: AbdConfig = AbdConfig()) -> list[np.ndarray]:
    """Clusters of (x, y) points, each with at least ``min_points`` members."""
    if len(scan) < 2:
        raise DegenerateScan("need at least 2 returns")
    if np.any(np.diff(scan.angles) < 0):
        raise ValueError("scan must be sorted by angle")
    xy = scan.points()
    gaps = np.hypot(*np.diff(xy, axis=0).T)
    thr = breakpoint_threshold(scan.ranges[:-1], np.diff(scan.angles), cfg)
    cuts = np.flatnonzero(gaps > thr) + 1
    return [c for c in np.split(xy, cuts) if len(c) >= cfg.min_points]


def extent(cluster: np.ndarray) -> float:
    """Largest pairwise distance inside a cluster."""
    d = cluster[:, None, :] - cluster[None, :, :]
    return float(np.sqrt((d**2).sum(-1)).max())


def detect(clusters, cfg: AbdConfig = AbdConfig()) -> list[Detection]:
    dets = []
    for c in clusters:
        if len(c) < cfg.min_points:
            continue
        # the bounding-box side is a cheap lower bound on the extent
        if np.ptp(c, axis=0).max() > cfg.max_object_size or extent(c) > cfg.max_object_size:
            continue
        cx, cy = c.mean(axis=0)
        r = math.hypot(cx, cy)
        if r > 0:
            cx, cy = cx * (r + cfg.push_back) / r, cy * (r + cfg.push_back) / r
        dets.append(Detection(float(cx), float(cy), 0.0, 0.0, 0.0, 1.0))
    return dets


def run(scan: LidarScan, cfg: AbdConfig = AbdConfig()) -> list[Detection]:
    if len(scan) < 2:
        return []
    return detect(segment(scan, cfg), cfg)
