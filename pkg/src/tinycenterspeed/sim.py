"""Synthetic 2D racetrack world with a ray-cast LiDAR and dataset I/O.

Cars drive along lane paths defined as lateral offsets from the track
centreline. A car either integrates its own speed profile or keeps a
time-varying gap behind another car. Ground-truth velocities are the
one-tick backward differences of ground-truth positions, i.e. exactly the
displacement seen between two consecutive scans.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .domain import EgoState, LidarScan, OppState, ReferenceLine, wrap_angle

DATASET_VERSION = 1
WALL_INTENSITY = 0.3
CAR_INTENSITY = 0.9


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class LidarModel:
    beams: int = 1080
    fov: float = math.radians(270.0)
    r_max: float = 10.0
    noise_std: float = 0.01

    def __post_init__(self):
        if self.beams < 2 or self.r_max <= 0:
            raise ValueError("need beams >= 2 and r_max > 0")

    @property
    def step(self) -> float:
        return self.fov / (self.beams - 1)

    def beam_angle(self, index):
        return -0.5 * self.fov + np.asarray(index) * self.step


@dataclass(frozen=True)
class Track:
    """Stadium-shaped circuit: two straights joined by two semicircles."""

    straight: float = 8.0
    radius: float = 3.5
    width: float = 2.2

    @property
    def length(self) -> float:
        return 2 * self.straight + 2 * math.pi * self.radius

    def centerline(self, s):
        """Position, tangent of the analytic centreline at arclength ``s``."""
        s = np.mod(np.asarray(s, dtype=np.float64), self.length)
        L, R = self.straight, self.radius
        arc = math.pi * R
        x = np.empty_like(s)
        y = np.empty_like(s)
        hd = np.empty_like(s)
        m0 = s < L
        x[m0], y[m0], hd[m0] = s[m0] - L / 2, -R, 0.0
        m1 = (s >= L) & (s < L + arc)
        a = (s[m1] - L) / R
        x[m1], y[m1], hd[m1] = L / 2 + R * np.sin(a), -R * np.cos(a), a
        m2 = (s >= L + arc) & (s < 2 * L + arc)
        x[m2], y[m2], hd[m2] = L / 2 - (s[m2] - L - arc), R, math.pi
        m3 = s >= 2 * L + arc
        a = (s[m3] - 2 * L - arc) / R
        x[m3], y[m3], hd[m3] = -L / 2 - R * np.sin(a), R * np.cos(a), math.pi + a
        return np.stack([x, y], axis=-1), hd

    def polyline(self, offset: float = 0.0, spacing: float = 0.1) -> np.ndarray:
        n = int(math.ceil(self.length / spacing))
        s = np.linspace(0.0, self.length, n, endpoint=False)
        pts, hd = self.centerline(s)
        normal = np.stack([-np.sin(hd), np.cos(hd)], axis=-1)
        return pts + offset * normal

    def reference_line(self) -> ReferenceLine:
        pts = self.polyline()
        return ReferenceLine(np.vstack([pts, pts[:1]]))

    def walls(self, spacing: float = 0.25) -> np.ndarray:
        """Inner and outer walls as (M, 4) segments [x0, y0, x1, y1]."""
        segs = []
        for off in (-0.5 * self.width, 0.5 * self.width):
            pts = self.polyline(off, spacing)
            nxt = np.roll(pts, -1, axis=0)
            segs.append(np.hstack([pts, nxt]))
        return np.vstack(segs)


@dataclass(frozen=True)
class Lane:
    """Lateral offset d(s) = bias + amplitude * sin(2 pi cycles s / L + phase)."""

    bias: float = 0.0
    amplitude: float = 0.0
    cycles: int = 1
    phase: float = 0.0

    def offset(self, s, track: Track):
        return self.bias + self.amplitude * np.sin(2 * math.pi * self.cycles * np.asarray(s) / track.length + self.phase)


@dataclass(frozen=True)
class SpeedProfile:
    """Speed as a smooth function of centreline arclength: straights fast, corners slow."""

    straight: float = 3.0
    corner: float = 1.8

    def __call__(self, s, track: Track):
        s = np.mod(np.asarray(s, dtype=np.float64), track.length)
        # weight 1 in the middle of a straight, 0 in the middle of a corner
        half = track.length / 2
        u = np.mod(s, half)
        phase = 2 * math.pi * (u - track.straight / 2) / half
        w = 0.5 + 0.5 * np.cos(phase)
        return self.corner + (self.straight - self.corner) * w


@dataclass(frozen=True)
class Car:
    lane: Lane = Lane()
    speed: SpeedProfile | None = SpeedProfile()
    start_s: float = 0.0
    # follow another car: s(t) = s_leader(t) - (gap + gap_amp * sin(2 pi t / gap_period + gap_phase))
    leader: int | None = None
    gap: float = 2.0
    gap_amp: float = 0.0
    gap_period: float = 10.0
    gap_phase: float = 0.0
    length: float = 0.5
    width: float = 0.3


@dataclass
class World:
    track: Track
    cars: list  # cars[0] is the ego vehicle
    lidar: LidarModel = LidarModel()
    rate: float = 25.0
    scenario: str = "custom"
    walls: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.walls = self.track.walls()


@dataclass(frozen=True)
class DatasetRecord:
    scan: LidarScan
    ego: EgoState
    opps: tuple
    t: float

    def __eq__(self, other):
        if not isinstance(other, DatasetRecord):
            return NotImplemented
        return (
            self.t == other.t and self.ego == other.ego and tuple(self.opps) == tuple(other.opps)
            and np.array_equal(self.scan.angles, other.scan.angles)
            and np.array_equal(self.scan.ranges, other.scan.ranges)
            and np.array_equal(self.scan.intensities, other.scan.intensities)
        )


# --- kinematics ------------------------------------------------------------

def _integrate_speed(car: Car, track: Track, times: np.ndarray, substeps: int = 8) -> np.ndarray:
    s = np.empty(len(times))
    s[0] = car.start_s
    if car.speed is None:
        s[:] = car.start_s
        return s
    for n in range(1, len(times)):
        h = (times[n] - times[n - 1]) / substeps
        x = s[n - 1]
        for _ in range(substeps):
            k1 = car.speed(x, track)
            k2 = car.speed(x + 0.5 * h * k1, track)
            k3 = car.speed(x + 0.5 * h * k2, track)
            k4 = car.speed(x + h * k3, track)
            x = x + h * (k1 + 2 * k2 + 2 * k3 + k4) / 6
        s[n] = x
    return s


def centerline_positions(world: World, times: np.ndarray) -> np.ndarray:
    """Centreline arclength of every car at every time, shape (cars, T)."""
    out = np.zeros((len(world.cars), len(times)))
    done = [False] * len(world.cars)

    def solve(i):
        if done[i]:
            return
        car = world.cars[i]
        if car.leader is None:
            out[i] = _integrate_speed(car, world.track, times)
        else:
            solve(car.leader)
            gap = car.gap + car.gap_amp * np.sin(2 * math.pi * times / car.gap_period + car.gap_phase)
            out[i] = out[car.leader] - gap
        done[i] = True

    for i in range(len(world.cars)):
        solve(i)
    return out


def car_pose(car: Car, track: Track, s):
    """Position (…, 2) and heading of a car whose centreline arclength is ``s``."""
    s = np.asarray(s, dtype=np.float64)
    pts, hd = track.centerline(s)
    normal = np.stack([-np.sin(hd), np.cos(hd)], axis=-1)
    d = car.lane.offset(s, track)
    # d'(s) tilts the heading away from the centreline direction
    eps = 1e-4
    dd = (car.lane.offset(s + eps, track) - car.lane.offset(s - eps, track)) / (2 * eps)
    heading = hd + np.arctan(dd)
    return pts + d[..., None] * normal, heading


def car_rectangle(x: float, y: float, heading: float, length: float, width: float) -> np.ndarray:
    """Footprint outline as (4, 4) segments."""
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    corners = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    world = corners @ np.array([[c, s], [-s, c]]) + [x, y]
    return np.hstack([world, np.roll(world, -1, axis=0)])


# --- ray casting -----------------------------------------------------------

def cast_rays(origin, angles: np.ndarray, segments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance per ray (inf if none) and the index of the hit segment."""
    ox, oy = origin
    dx, dy = np.cos(angles)[:, None], np.sin(angles)[:, None]
    px, py = segments[None, :, 0] - ox, segments[None, :, 1] - oy
    ex, ey = (segments[:, 2] - segments[:, 0])[None], (segments[:, 3] - segments[:, 1])[None]
    denom = dx * ey - dy * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (px * ey - py * ex) / denom
        u = (px * dy - py * dx) / denom
    valid = (np.abs(denom) > 1e-12) & (r > 1e-9) & (u >= 0.0) & (u <= 1.0)
    r = np.where(valid, r, np.inf)
    idx = np.argmin(r, axis=1)
    return r[np.arange(len(angles)), idx], idx


def raycast(world: World, ego: EgoState, car_states: Sequence[tuple[float, float, float]],
            rng: np.random.Generator | None = None, t: float = 0.0) -> LidarScan:
    """Scan seen from ``ego``; ``car_states`` are (x, y, heading) of the other cars.

    Returns are sorted by beam angle in the ego frame; range noise is a
    Gaussian truncated at 3 sigma.
    """
    lidar = world.lidar
    segs = [world.walls]
    is_car = [np.zeros(len(world.walls), dtype=bool)]
    for car, (x, y, hd) in zip(world.cars[1:], car_states):
        segs.append(car_rectangle(x, y, hd, car.length, car.width))
        is_car.append(np.ones(4, dtype=bool))
    segments = np.vstack(segs)
    material = np.where(np.concatenate(is_car), CAR_INTENSITY, WALL_INTENSITY)
    local = lidar.beam_angle(np.arange(lidar.beams))
    r, idx = cast_rays((ego.x, ego.y), local + ego.theta, segments)
    hit = r <= lidar.r_max
    if rng is not None and lidar.noise_std > 0:
        noise = np.clip(rng.standard_normal(lidar.beams), -3.0, 3.0) * lidar.noise_std
        r = r + noise
        hit &= (r > 0) & (r <= lidar.r_max)
    beams = np.flatnonzero(hit)
    ranges = r[beams]
    intensity = np.clip(material[idx[beams]] / ranges, 0.0, 1.0)
    return LidarScan(local[beams], ranges, intensity, t)


def _quantize(a: np.ndarray, step: float = 1e-4) -> np.ndarray:
    return np.round(np.asarray(a) / step) * step


def simulate(world: World, duration: float, seed: int = 0) -> list[list[DatasetRecord]]:
    """Run the world for ``duration`` seconds; returns a single sequence.

    Ranges and intensities are rounded to 1e-4 so that records survive a
    text round trip unchanged.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * world.rate))
    dt = 1.0 / world.rate
    times = np.arange(-1, n) * dt
    s_all = centerline_positions(world, times)
    poses = [car_pose(car, world.track, s_all[i]) for i, car in enumerate(world.cars)]
    rng = np.random.default_rng(seed)
    records = []
    for k in range(1, n + 1):
        t = round(times[k], 9)
        ex, ey = poses[0][0][k]
        ego = EgoState(float(ex), float(ey), wrap_angle(float(poses[0][1][k])))
        states, opps = [], []
        for pos, hd in poses[1:]:
            x, y = pos[k]
            vx, vy = (pos[k] - pos[k - 1]) / dt
            states.append((float(x), float(y), float(hd[k])))
            opps.append(OppState(float(x), float(y), float(vx), float(vy), wrap_angle(float(hd[k]))))
        scan = raycast(world, ego, states, rng, t)
        scan = LidarScan(scan.angles, _quantize(scan.ranges), _quantize(scan.intensities), t)
        records.append(DatasetRecord(scan, ego, tuple(opps), t))
    return [records]


# --- scenarios -------------------------------------------------------------

SCENARIOS = ("follow", "duel", "static", "fast")


def build_world(name: str, seed: int = 0, lidar: LidarModel | None = None) -> World:
    """Built-in scenario worlds; the seed jitters phases, gaps and speeds."""
    if name not in SCENARIOS:
        raise KeyError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")
    rng = np.random.default_rng([seed, 17])
    track = Track()
    j = lambda lo, hi: float(rng.uniform(lo, hi))  # noqa: E731
    lidar = lidar or LidarModel()
    if name in ("follow", "fast"):
        scale = 1.8 if name == "fast" else 1.0
        # gap and lane swing span roughly 0.9-4.3 m ahead and +-0.6 m lateral so that
        # training covers opponents near the walls and far ahead
        opp = Car(lane=Lane(0.0, j(0.45, 0.6), 2, j(0, 2 * math.pi)),
                  speed=SpeedProfile(j(2.8, 3.2) * scale, j(1.6, 2.0) * scale), start_s=j(0, track.length))
        ego = Car(lane=Lane(0.0, j(0.15, 0.3), 3, j(0, 2 * math.pi)), speed=None, leader=1,
                  gap=j(2.4, 2.8), gap_amp=j(1.2, 1.5), gap_period=j(8, 11), gap_phase=j(0, 2 * math.pi))
        cars = [ego, opp]
    elif name == "duel":
        lead = Car(lane=Lane(-0.45, 0.05, 2, j(0, 2 * math.pi)), speed=SpeedProfile(j(2.6, 3.0), j(1.6, 1.9)),
                   start_s=j(0, track.length))
        second = Car(lane=Lane(0.45, 0.05, 3, j(0, 2 * math.pi)), speed=None, leader=2,
                     gap=j(1.4, 1.8), gap_amp=0.3, gap_period=j(7, 9), gap_phase=j(0, 2 * math.pi))
        ego = Car(lane=Lane(0.0, 0.1, 2, j(0, 2 * math.pi)), speed=None, leader=2,
                  gap=j(3.1, 3.4), gap_amp=0.3, gap_period=j(9, 12), gap_phase=j(0, 2 * math.pi))
        cars = [ego, second, lead]
    else:
        # the parked car sits off the racing line so the ego lane never crosses it
        side = 1.0 if rng.random() < 0.5 else -1.0
        opp = Car(lane=Lane(side * j(0.6, 0.8)), speed=None, start_s=j(0, track.straight))
        ego = Car(lane=Lane(0.0, 0.1, 2, j(0, 2 * math.pi)), speed=SpeedProfile(2.2, 1.6),
                  start_s=opp.start_s - j(3.0, 5.0))
        cars = [ego, opp]
    return World(track, cars, lidar, 25.0, name)


# --- dataset file ----------------------------------------------------------

def write_dataset(records: Iterable[DatasetRecord], path, lidar: LidarModel, rate: float,
                  scenario: str | None = None) -> None:
    header = {"version": DATASET_VERSION, "beams": lidar.beams, "fov": lidar.fov, "r_max": lidar.r_max, "rate": rate}
    if scenario:
        header["scenario"] = scenario
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in records:
            idx = np.rint((rec.scan.angles + 0.5 * lidar.fov) / lidar.step).astype(int)
            hits = [[int(i), float(r), float(v)] for i, r, v in zip(idx, rec.scan.ranges, rec.scan.intensities)]
            row = {
                "t": rec.t,
                "ego": [rec.ego.x, rec.ego.y, rec.ego.theta],
                "opps": [[o.x, o.y, o.v_x, o.v_y, o.theta] for o in rec.opps],
                "hits": hits,
            }
            fh.write(json.dumps(row) + "\n")


@dataclass
class Dataset:
    records: list
    lidar: LidarModel
    rate: float
    scenario: str | None = None

    def sequences(self) -> list[list[DatasetRecord]]:
        return split_sequences(self.records)


def read_dataset(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SchemaError(f"{path}:1: missing header")
    try:
        header = json.loads(lines[0])
        if header.get("version") != DATASET_VERSION:
            raise SchemaError(f"{path}:1: unsupported dataset version {header.get('version')!r}")
        lidar = LidarModel(int(header["beams"]), float(header["fov"]), float(header["r_max"]))
        rate = float(header["rate"])
    except SchemaError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise SchemaError(f"{path}:1: malformed header ({exc})") from None
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
            hits = np.asarray(row["hits"], dtype=np.float64).reshape(-1, 3)
            t = float(row["t"])
            scan = LidarScan(lidar.beam_angle(hits[:, 0].astype(int)), hits[:, 1], hits[:, 2], t)
            ego = EgoState(*(float(v) for v in row["ego"]))
            opps = tuple(OppState(*(float(v) for v in o)) for o in row["opps"])
            if len(row["ego"]) != 3:
                raise ValueError("ego needs 3 values")
        except (ValueError, KeyError, TypeError) as exc:
            raise SchemaError(f"{path}:{lineno}: malformed record ({exc})") from None
        records.append(DatasetRecord(scan, ego, opps, t))
    return Dataset(records, lidar, rate, header.get("scenario"))


def split_sequences(records: Sequence[DatasetRecord]) -> list[list[DatasetRecord]]:
    """Split a record stream wherever time stops increasing."""
    seqs: list[list[DatasetRecord]] = []
    for rec in records:
        if not seqs or rec.t <= seqs[-1][-1].t:
            seqs.append([])
        seqs[-1].append(rec)
    return seqs
