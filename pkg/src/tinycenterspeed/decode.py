"""Heatmap peak decoding and detection-to-ground-truth matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bev import BevConfig, HeatmapSet, ShapeMismatch
from .domain import Detection


@dataclass(frozen=True)
class DecodeConfig:
    score_threshold: float = 0.3
    nms_radius: float = 3.0
    max_detections: int = 5
    subpixel: bool = True

    def __post_init__(self):
        if not 0.0 < self.score_threshold < 1.0:
            raise ValueError("score_threshold must lie in (0, 1)")
        if self.nms_radius < 1:
            raise ValueError("nms_radius must be >= 1")


def local_maxima(pos: np.ndarray, threshold: float) -> np.ndarray:
    """(row, col) of cells >= all 8 neighbours and >= threshold."""
    padded = np.pad(pos, 1, constant_values=-np.inf)
    k0, k1 = pos.shape
    is_max = pos >= threshold
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            if di or dj:
                is_max &= pos >= padded[1 + di:1 + di + k0, 1 + dj:1 + dj + k1]
    return np.argwhere(is_max)


def _vertex_offset(fm: float, f0: float, fp: float) -> float:
    if fm > 0 and f0 > 0 and fp > 0:
        # a Gaussian is an exact parabola in log space
        fm, f0, fp = np.log(fm), np.log(f0), np.log(fp)
    curvature = 2.0 * f0 - fm - fp
    if curvature <= 0:
        return 0.0
    return float(np.clip(0.5 * (fp - fm) / curvature, -0.5, 0.5))


def refine_peak(pos: np.ndarray, i: int, j: int) -> tuple[float, float]:
    """Sub-pixel peak location from a per-axis parabola through the 3x3 neighbourhood."""
    k0, k1 = pos.shape
    di = _vertex_offset(pos[i - 1, j], pos[i, j], pos[i + 1, j]) if 0 < i < k0 - 1 else 0.0
    dj = _vertex_offset(pos[i, j - 1], pos[i, j], pos[i, j + 1]) if 0 < j < k1 - 1 else 0.0
    return i + di, j + dj


def decode(heatmaps, cfg: DecodeConfig, bev: BevConfig) -> list[Detection]:
    h = heatmaps.as_array() if isinstance(heatmaps, HeatmapSet) else np.asarray(heatmaps)
    if h.shape != (4, bev.k, bev.k):
        raise ShapeMismatch(f"expected (4, {bev.k}, {bev.k}), got {h.shape}")
    pos = h[0]
    peaks = local_maxima(pos, cfg.score_threshold)
    if not len(peaks):
        return []
    values = pos[peaks[:, 0], peaks[:, 1]]
    order = np.argsort(-values, kind="stable")
    kept: list[tuple[float, float, int, int]] = []
    for idx in order:
        i, j = (int(v) for v in peaks[idx])
        u, v = refine_peak(pos, i, j) if cfg.subpixel else (float(i), float(j))
        if any((u - a) ** 2 + (v - b) ** 2 <= cfg.nms_radius**2 for a, b, _, _ in kept):
            continue
        kept.append((u, v, i, j))
        if len(kept) == cfg.max_detections:
            break
    dets = []
    for u, v, i, j in kept:
        x, y = bev.to_metric(u, v)
        dets.append(Detection(
            x=float(x), y=float(y),
            v_x=float(h[1, i, j]), v_y=float(h[2, i, j]), theta=float(h[3, i, j]),
            score=float(np.clip(pos[i, j], 0.0, 1.0)),
        ))
    return dets


@dataclass
class MatchResult:
    pairs: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    unmatched_dets: list = field(default_factory=list)
    unmatched_gts: list = field(default_factory=list)

    @property
    def missed(self) -> int:
        return len(self.unmatched_gts)

    @property
    def false_dets(self) -> int:
        return len(self.unmatched_dets)


def match(dets, gts, gate: float = 1.0) -> MatchResult:
    """Greedy nearest-pair association on Euclidean position distance.

    ``dets`` and ``gts`` only need ``x`` and ``y`` attributes.
    """
    if gate <= 0:
        raise ValueError("gate must be positive")
    result = MatchResult()
    used_d: set[int] = set()
    used_g: set[int] = set()
    if dets and gts:
        d = np.array([[det.x, det.y] for det in dets])
        g = np.array([[gt.x, gt.y] for gt in gts])
        dist = np.hypot(d[:, None, 0] - g[None, :, 0], d[:, None, 1] - g[None, :, 1])
        for flat in np.argsort(dist, axis=None, kind="stable"):
            a, b = divmod(int(flat), len(gts))
            if dist[a, b] > gate:
                break
            if a in used_d or b in used_g:
                continue
            used_d.add(a)
            used_g.add(b)
            result.pairs.append((dets[a], gts[b]))
            result.distances.append(float(dist[a, b]))
    result.unmatched_dets = [x for n, x in enumerate(dets) if n not in used_d]
    result.unmatched_gts = [x for n, x in enumerate(gts) if n not in used_g]
    return result
