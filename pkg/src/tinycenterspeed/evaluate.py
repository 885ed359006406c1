"""Frenet-frame error metrics and the detector comparison harness."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field, fields
from typing import Protocol, Sequence

import numpy as np

from .bev import BevConfig
from .decode import match
from .domain import Detection, ReferenceLine, cartesian_to_frenet, detection_to_global, global_to_local
from .track import KfConfig, Tracker


class LengthMismatch(ValueError):
    pass


class EmptySeries(ValueError):
    pass


class NoMatches(ValueError):
    pass


def rmse(y, yhat) -> float:
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise LengthMismatch(f"{y.shape} vs {yhat.shape}")
    if y.size == 0:
        raise EmptySeries("rmse of an empty series")
    return float(np.sqrt(np.mean((y - yhat) ** 2)))


def mate_mave(pairs) -> tuple[float, float]:
    """Mean translation and velocity-vector error over (det, gt) pairs."""
    if not pairs:
        raise NoMatches("mATE/mAVE need at least one matched pair")
    te = [math.hypot(d.x - g.x, d.y - g.y) for d, g in pairs]
    ve = [math.hypot(d.v_x - g.v_x, d.v_y - g.v_y) for d, g in pairs]
    return float(np.mean(te)), float(np.mean(ve))


@dataclass
class ErrorLog:
    """Signed per-pair errors accumulated over a run."""

    s: list = field(default_factory=list)
    d: list = field(default_factory=list)
    vs: list = field(default_factory=list)
    vd: list = field(default_factory=list)
    trans: list = field(default_factory=list)
    vel: list = field(default_factory=list)
    gts: int = 0
    missed: int = 0
    false_dets: int = 0
    missed_per_object: dict = field(default_factory=dict)
    gts_per_object: dict = field(default_factory=dict)

    def add_frame(self, dets_global, gts_global, ref: ReferenceLine, gate: float):
        result = match(dets_global, gts_global, gate)
        self.gts += len(gts_global)
        self.missed += result.missed
        self.false_dets += result.false_dets
        for n, gt in enumerate(gts_global):
            key = getattr(gt, "object_id", n)
            self.gts_per_object[key] = self.gts_per_object.get(key, 0) + 1
        for gt in result.unmatched_gts:
            key = getattr(gt, "object_id", gts_global.index(gt))
            self.missed_per_object[key] = self.missed_per_object.get(key, 0) + 1
        for det, gt in result.pairs:
            fg = cartesian_to_frenet(gt.x, gt.y, gt.v_x, gt.v_y, ref)
            fd = cartesian_to_frenet(det.x, det.y, det.v_x, det.v_y, ref)
            self.s.append(ref.s_difference(fd.s, fg.s))
            self.d.append(fd.d - fg.d)
            self.vs.append(fd.v_s - fg.v_s)
            self.vd.append(fd.v_d - fg.v_d)
            self.trans.append(math.hypot(det.x - gt.x, det.y - gt.y))
            self.vel.append(math.hypot(det.v_x - gt.v_x, det.v_y - gt.v_y))
        return result

    @property
    def matched(self) -> int:
        return len(self.s)


def _mu_sigma(errors) -> tuple[float, float]:
    if not errors:
        return math.nan, math.nan
    e = np.asarray(errors)
    return rmse(np.zeros_like(e), e), float(np.std(np.abs(e)))


@dataclass
class EvalReport:
    method: str
    quant: bool | None
    tracking: bool
    mu_s: float = math.nan
    sigma_s: float = math.nan
    mu_d: float = math.nan
    sigma_d: float = math.nan
    mu_vs: float | None = None
    sigma_vs: float | None = None
    mu_vd: float | None = None
    sigma_vd: float | None = None
    improvement: float | None = None
    mate: float = math.nan
    mave: float | None = None
    detections: int = 0
    missed: int = 0
    false_dets: int = 0
    gt_count: int = 0
    latency_mean_ms: float = math.nan
    latency_std_ms: float = math.nan
    pipeline_mean_ms: float = math.nan
    missed_per_object: dict = field(default_factory=dict)
    gts_per_object: dict = field(default_factory=dict)

    TIMING_FIELDS = ("latency_mean_ms", "latency_std_ms", "pipeline_mean_ms")

    @property
    def has_velocity(self) -> bool:
        return self.mu_vs is not None

    @classmethod
    def from_log(cls, method, quant, tracking, log: ErrorLog, with_velocity: bool) -> "EvalReport":
        r = cls(method, quant, tracking)
        r.mu_s, r.sigma_s = _mu_sigma(log.s)
        r.mu_d, r.sigma_d = _mu_sigma(log.d)
        if with_velocity:
            r.mu_vs, r.sigma_vs = _mu_sigma(log.vs)
            r.mu_vd, r.sigma_vd = _mu_sigma(log.vd)
            r.mave = float(np.mean(log.vel)) if log.vel else math.nan
        r.mate = float(np.mean(log.trans)) if log.trans else math.nan
        r.detections, r.missed, r.false_dets, r.gt_count = log.matched, log.missed, log.false_dets, log.gts
        return r

    def comparable(self) -> dict:
        """All fields except wall-clock timings."""
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in self.TIMING_FIELDS}


class Detector(Protocol):
    name: str
    quant: bool | None
    provides_velocity: bool

    def prepare(self, prev, curr): ...

    def infer(self, prepared) -> list[Detection]: ...


def gt_in_view(record, bev: BevConfig):
    """Ground-truth opponents (global frame) that fall inside the BEV grid, tagged with their index."""
    out = []
    for n, opp in enumerate(record.opps):
        loc = global_to_local(opp, record.ego)
        if bev.in_fov(loc.x, loc.y):
            out.append(_TaggedOpp(opp.x, opp.y, opp.v_x, opp.v_y, opp.theta, n))
    return out


@dataclass(frozen=True)
class _TaggedOpp:
    x: float
    y: float
    v_x: float
    v_y: float
    theta: float
    object_id: int


def improvement(row: EvalReport, base: EvalReport) -> float | None:
    gains = []
    for name in ("mu_s", "mu_d", "mu_vs", "mu_vd"):
        a, b = getattr(row, name), getattr(base, name)
        if a is None or b is None or not b or math.isnan(a) or math.isnan(b):
            continue
        gains.append(100.0 * (b - a) / b)
    return float(np.mean(gains)) if gains else None


def run_comparison(sequences, detectors: Sequence[Detector], ref: ReferenceLine, bev: BevConfig,
                   tracking: Sequence[bool] = (False,), kf: KfConfig = KfConfig(),
                   gate: float = 1.0) -> list[EvalReport]:
    """Run every detector over the identical frame stream and score it.

    Detectors run one after another; latency covers ``infer`` only and the
    pipeline figure adds input preparation.
    """
    reports = []
    for det in detectors:
        logs = {trk: ErrorLog() for trk in tracking}
        lat, pipe = [], []
        for seq in sequences:
            trackers = {trk: Tracker(kf, use_velocity=det.provides_velocity) for trk in tracking if trk}
            for n in range(1, len(seq)):
                prev, rec = seq[n - 1], seq[n]
                t0 = time.perf_counter()
                prepared = det.prepare(prev, rec)
                t1 = time.perf_counter()
                local = det.infer(prepared)
                t2 = time.perf_counter()
                lat.append(1e3 * (t2 - t1))
                pipe.append(1e3 * (t2 - t0))
                dets = [detection_to_global(d, rec.ego) for d in local]
                gts = gt_in_view(rec, bev)
                for trk, log in logs.items():
                    if trk:
                        tracks = trackers[trk].step(dets, rec.t)
                        out = [tr.as_detection() for tr in tracks if tr.age >= 2]
                    else:
                        out = dets
                    log.add_frame(out, gts, ref, gate)
        for trk, log in logs.items():
            r = EvalReport.from_log(det.name, det.quant, trk, log, det.provides_velocity or trk)
            r.latency_mean_ms = float(np.mean(lat)) if lat else math.nan
            r.latency_std_ms = float(np.std(lat)) if lat else math.nan
            r.pipeline_mean_ms = float(np.mean(pipe)) if pipe else math.nan
            r.missed_per_object = dict(log.missed_per_object)
            r.gts_per_object = dict(log.gts_per_object)
            reports.append(r)
    for r in reports:
        if r.method != "ABD":
            base = next((b for b in reports if b.method == "ABD" and b.tracking == r.tracking), None)
            if base is not None:
                r.improvement = improvement(r, base)
    return reports


# --- output ----------------------------------------------------------------

COLUMNS = ["method", "quant", "tracking", "mu_s", "sigma_s", "mu_d", "sigma_d", "mu_vs", "sigma_vs",
           "mu_vd", "sigma_vd", "improvement", "mate", "mave", "detections", "missed", "false_dets",
           "gt_count", "latency_mean_ms", "latency_std_ms", "pipeline_mean_ms"]


def _fmt(value) -> str:
    if value is None:
        return "-"
    if isinstance(value, bool):
        return "yes" if value else "no"
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def write_report_csv(reports: Sequence[EvalReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(COLUMNS)
        for r in reports:
            w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])


def read_report_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def format_table(reports: Sequence[EvalReport]) -> str:
    head = ["method", "quant", "track", "mu_s", "sig_s", "mu_d", "sig_d", "mu_vs", "sig_vs", "mu_vd", "sig_vd",
            "impr%"]
    rows = [head]
    for r in reports:
        cells = [r.method, "-" if r.quant is None else ("yes" if r.quant else "no"), "yes" if r.tracking else "no"]
        for c in COLUMNS[3:12]:
            v = getattr(r, c)
            cells.append("-" if v is None else ("nan" if math.isnan(v) else f"{v:.3f}" if c != "improvement"
                                                else f"{v:.2f}"))
        rows.append(cells)
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in rows)
