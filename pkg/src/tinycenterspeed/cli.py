"""``tcs`` command line: simulate, train, eval, infer, bench, plot.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 non-finite training loss, 5 bad data.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import model as tcs_model
from . import quant, sim
from .bev import BevConfig
from .domain import ReferenceLine
from .evaluate import format_table, read_report_csv, run_comparison, write_report_csv
from .nn import CheckpointError
from .pipeline import AbdDetector, NnDetector, bev_input
from .track import KfConfig

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_DATA = 0, 2, 3, 4, 5
CALIBRATION_FRAMES = 64

log = logging.getLogger("tcs")


class DataError(Exception):
    pass


# --- argument types ----------------------------------------------------------

def _positive_float(raw: str) -> float:
    v = float(raw)
    if not v > 0 or not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"must be a positive number, got {raw}")
    return v


def _positive_int(raw: str) -> int:
    v = int(raw)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {raw}")
    return v


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("TCS_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise DataError(f"TCS_SEED must be an integer, got {env!r}") from None


# --- shared helpers ----------------------------------------------------------

def _read(path) -> sim.Dataset:
    ds = sim.read_dataset(path)
    if not ds.records:
        raise DataError(f"{path}: no records")
    return ds


def _dedupe(points: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    keep = [points[0]]
    for p in points[1:]:
        if np.hypot(*(p - keep[-1])) > tol:
            keep.append(p)
    return np.asarray(keep)


def reference_for(ds: sim.Dataset, spec: str = "auto") -> ReferenceLine:
    """``auto``: the scenario track centreline, else the first opponent's path; otherwise a waypoint file."""
    if spec != "auto":
        text = Path(spec).read_text().replace(",", " ")
        try:
            return ReferenceLine(np.loadtxt(text.splitlines(), ndmin=2)[:, :2])
        except ValueError as exc:
            raise DataError(f"{spec}: bad reference waypoints ({exc})") from None
    if ds.scenario in sim.SCENARIOS:
        return sim.build_world(ds.scenario).track.reference_line()
    path = np.array([[r.opps[0].x, r.opps[0].y] for r in ds.records if r.opps])
    path = _dedupe(path) if len(path) else path
    if len(path) < 2:
        raise DataError("cannot derive a reference line: opponent never moves")
    return ReferenceLine(path)


def _has_gt(ds: sim.Dataset) -> bool:
    return any(r.opps for r in ds.records)


def calibration_inputs(sequences, bev: BevConfig, limit: int = CALIBRATION_FRAMES) -> list[np.ndarray]:
    out = []
    for seq in sequences:
        for n in range(1, len(seq)):
            if len(out) == limit:
                return out
            out.append(bev_input(seq[n - 1].scan, seq[n].scan, bev))
    return out


def _quant_model(args, net, bev, sequences) -> quant.QuantModel:
    if getattr(args, "qckpt", None):
        return quant.load_quant(args.qckpt)
    return quant.quantize_model(net, calibration_inputs(sequences, bev), bev)


# --- subcommands -------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = _seed(args)
    world = sim.build_world(args.scenario, seed)
    records = sim.simulate(world, args.duration, seed)[0]
    sim.write_dataset(records, args.out, world.lidar, world.rate, args.scenario)
    print(f"wrote {len(records)} records ({args.scenario}, {world.rate:g} Hz) to {args.out}")
    return EXIT_OK


def _run_config(args) -> tcs_model.RunConfig:
    cfg = tcs_model.load_config(args.config)
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    # precedence: --seed, then the config file, then $TCS_SEED
    if args.seed is not None or (args.config is None and "TCS_SEED" in os.environ):
        overrides["seed"] = _seed(args)
    return replace(cfg, **overrides).validate()


def cmd_train(args) -> int:
    try:
        cfg = _run_config(args)
    except ValueError as exc:
        print(f"tcs train: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.dry_run:
        print(cfg.dumps(), end="")
        return EXIT_OK
    ds = _read(args.data)
    if not _has_gt(ds):
        raise DataError(f"{args.data}: no ground truth opponents")
    sequences = ds.sequences()
    bev = cfg.bev()
    ref = reference_for(ds, args.ref)
    result = tcs_model.train(sequences, cfg.training(), cfg.loss(), bev, ref, cfg.model(),
                             on_epoch=lambda m: print(f"epoch {m.epoch}: loss {m.train_loss:.4f} "
                                                      f"val s {m.val_rmse_s:.3f} d {m.val_rmse_d:.3f} "
                                                      f"vs {m.val_rmse_vs:.3f} vd {m.val_rmse_vd:.3f}",
                                                      flush=True))
    out = Path(args.out)
    tcs_model.save_checkpoint(result.model, bev, out)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".metrics.csv")
    tcs_model.write_metrics_csv(result.metrics, metrics)
    calib = calibration_inputs(sequences, bev)
    if len(calib) >= quant.MIN_CALIBRATION:
        quant.save_quant(quant.quantize_model(result.model, calib, bev), out.with_suffix(".tcsq"))
    else:
        log.warning("too few frames to calibrate; no quantized checkpoint written")
    print(f"best epoch {result.best_epoch}; wrote {out} and {metrics}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.ckpt and not args.abd:
        print("tcs eval: error: nothing to evaluate: give --ckpt and/or --abd", file=sys.stderr)
        return EXIT_USAGE
    ds = _read(args.data)
    if not _has_gt(ds):
        raise DataError(f"{args.data}: no ground truth opponents")
    sequences = ds.sequences()
    detectors = []
    bev = BevConfig()
    if args.ckpt:
        net, bev = tcs_model.load_checkpoint(args.ckpt)
        detectors.append(NnDetector(net, bev))
        if args.quant:
            detectors.append(NnDetector(_quant_model(args, net, bev, sequences), bev))
    if args.abd:
        detectors.append(AbdDetector())
    ref = reference_for(ds, args.ref)
    tracking = (False, True) if args.track else (False,)
    reports = run_comparison(sequences, detectors, ref, bev, tracking, KfConfig(), args.gate)
    write_report_csv(reports, args.out)
    print(format_table(reports))
    return EXIT_OK


def _detection_json(d) -> dict:
    return {"x": d.x, "y": d.y, "v_x": d.v_x, "v_y": d.v_y, "theta": d.theta, "score": d.score}


def cmd_infer(args) -> int:
    ds = _read(args.scan_stream)
    net, bev = tcs_model.load_checkpoint(args.ckpt)
    sequences = ds.sequences()
    det = NnDetector(_quant_model(args, net, bev, sequences) if args.quant else net, bev)
    for seq in sequences:
        for n, rec in enumerate(seq):
            # the first frame has no predecessor and is paired with itself
            prev = seq[n - 1] if n else rec
            dets = det.infer(det.prepare(prev, rec))
            print(json.dumps({"t": rec.t, "detections": [_detection_json(d) for d in dets]}))
    return EXIT_OK


def _bench_frames(args, n: int):
    if args.data:
        seqs = _read(args.data).sequences()
    else:
        seed = _seed(args)
        world = sim.build_world("follow", seed)
        seqs = sim.simulate(world, (n + 1) / world.rate, seed)
    return seqs


def cmd_bench(args) -> int:
    net, bev = tcs_model.load_checkpoint(args.ckpt)
    sequences = _bench_frames(args, args.frames)
    inputs = calibration_inputs(sequences, bev, limit=max(args.frames, quant.MIN_CALIBRATION))
    if not inputs:
        raise DataError("no frame pairs to benchmark")
    qnet = quant.load_quant(args.qckpt) if args.qckpt else quant.quantize_model(net, inputs, bev)
    for label, detector in (("float", NnDetector(net, bev)), ("quant", NnDetector(qnet, bev))):
        times = []
        for i in range(args.frames):
            inp = inputs[i % len(inputs)]
            t0 = time.perf_counter()
            detector.infer(inp)
            times.append(1e3 * (time.perf_counter() - t0))
        print(f"{label}: mu {np.mean(times):.3f} ms  sigma {np.std(times):.3f} ms  (n={args.frames})")
    return EXIT_OK


# --- plot --------------------------------------------------------------------

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"]


def svg_lines(series: dict[str, list[float]], labels: list[str], title: str, ylabel: str) -> str:
    """Minimal line chart; NaN points break a line."""
    w, h, m = 640, 400, 60
    values = [v for ys in series.values() for v in ys if v is not None and math.isfinite(v)]
    top = max(values) * 1.1 if values and max(values) > 0 else 1.0
    n = max(len(labels), 2)
    px = lambda i: m + (w - 2 * m) * i / (n - 1)  # noqa: E731
    py = lambda v: h - m - (h - 2 * m) * v / top  # noqa: E731
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" '
             f'font-size="12">',
             f'<text x="{w / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>',
             f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>',
             f'<text x="15" y="{h / 2}" transform="rotate(-90 15 {h / 2})" text-anchor="middle">{ylabel}</text>']
    for frac in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{m - 5}" y="{py(top * frac) + 4:.1f}" text-anchor="end">{top * frac:.3g}</text>')
    step = max(1, len(labels) // 12)
    for i, lab in enumerate(labels):
        if i % step == 0:
            parts.append(f'<text x="{px(i):.1f}" y="{h - m + 18}" text-anchor="middle">{lab}</text>')
    for c, (name, ys) in enumerate(series.items()):
        color = _PALETTE[c % len(_PALETTE)]
        run: list[str] = []
        for i, v in enumerate(ys + [None]):
            if v is not None and math.isfinite(v):
                run.append(f"{px(i):.1f},{py(v):.1f}")
                continue
            if len(run) > 1:
                parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(run)}"/>')
            for pt in run if len(run) == 1 else []:
                x, y = pt.split(",")
                parts.append(f'<circle cx="{x}" cy="{y}" r="3" fill="{color}"/>')
            run = []
        parts.append(f'<text x="{w - m + 5}" y="{m + 15 * c}" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_pgm(img: np.ndarray, path) -> None:
    """8-bit binary PGM, linearly scaled from the array's own min/max."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    # rows run along +x away from the car, so put the far edge at the top
    data = np.round(255 * scaled[::-1]).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def _num(raw: str):
    try:
        v = float(raw)
    except ValueError:
        return None
    return v


def cmd_plot(args) -> int:
    rows = read_report_csv(args.report)
    if not rows:
        raise DataError(f"{args.report}: empty report")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = ["mu_s", "mu_d", "mu_vs", "mu_vd"]
    series = {}
    for r in rows:
        name = f"{r['method']} q={r['quant']} trk={r['tracking']}"
        series[name] = [_num(r[c]) for c in metrics]
    (out / "errors.svg").write_text(svg_lines(series, metrics, "RMSE per state", "RMSE"))
    written = ["errors.svg"]
    if args.metrics:
        with open(args.metrics, newline="") as fh:
            mrows = list(csv.DictReader(fh))
        if mrows:
            curves = {c: [_num(r[c]) for r in mrows] for c in tcs_model.METRIC_COLUMNS[2:]}
            labels = [r["epoch"] for r in mrows]
            (out / "val_rmse.svg").write_text(svg_lines(curves, labels, "validation RMSE", "RMSE"))
            loss = {"train_loss": [_num(r["train_loss"]) for r in mrows]}
            (out / "train_loss.svg").write_text(svg_lines(loss, labels, "training loss", "loss"))
            written += ["val_rmse.svg", "train_loss.svg"]
    if args.ckpt and args.data:
        net, bev = tcs_model.load_checkpoint(args.ckpt)
        seqs = _read(args.data).sequences()
        seq = max(seqs, key=len)
        n = min(max(args.frame, 1), len(seq) - 1) if len(seq) > 1 else 0
        inp = bev_input(seq[max(n - 1, 0)].scan, seq[n].scan, bev)
        heat = NnDetector(net, bev).heatmaps(inp)
        for name, img in zip(("pos", "v_x", "v_y", "yaw"), heat):
            write_pgm(img, out / f"heatmap_{name}.pgm")
            written.append(f"heatmap_{name}.pgm")
        write_pgm(inp[3], out / "input_occupancy.pgm")
        written.append("input_occupancy.pgm")
    print("wrote " + ", ".join(str(out / w) for w in written))
    return EXIT_OK


# --- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tcs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--scenario", required=True, choices=sim.SCENARIOS, help="built-in scenario")
    s.add_argument("--duration", required=True, type=_positive_float, help="seconds of driving")
    s.add_argument("--seed", type=int, help="random seed (default: $TCS_SEED or 0)")
    s.add_argument("--out", required=True, help="output dataset (.jsonl)")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train the heatmap network")
    t.add_argument("--data", help="training dataset (.jsonl)")
    t.add_argument("--config", help="key = value training config file")
    t.add_argument("--out", help="output checkpoint; a .tcsq and .metrics.csv are written alongside")
    t.add_argument("--metrics", help="metrics CSV path (default: <out>.metrics.csv)")
    t.add_argument("--epochs", type=_positive_int, help="override the configured epoch count")
    t.add_argument("--seed", type=int, help="override the configured seed")
    t.add_argument("--ref", default="auto", help="'auto' or a waypoint file for validation metrics")
    t.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="compare detectors on a dataset")
    e.add_argument("--data", required=True, help="evaluation dataset (.jsonl)")
    e.add_argument("--ckpt", help="float checkpoint (.tcsw)")
    e.add_argument("--quant", action="store_true", help="add the quantized network row")
    e.add_argument("--qckpt", help="quantized checkpoint; default calibrates on the first 64 frames")
    e.add_argument("--track", action="store_true", help="add rows with Kalman tracking")
    e.add_argument("--abd", action="store_true", help="add the breakpoint-clustering baseline")
    e.add_argument("--ref", default="auto", help="'auto' or a waypoint file")
    e.add_argument("--gate", type=_positive_float, default=1.0, help="matching gate in metres")
    e.add_argument("--out", required=True, help="report CSV")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="print detections per frame as JSON lines")
    i.add_argument("--scan-stream", required=True, help="dataset (.jsonl) to read scans from")
    i.add_argument("--ckpt", required=True, help="float checkpoint (.tcsw)")
    i.add_argument("--quant", action="store_true", help="use the integer path")
    i.add_argument("--qckpt", help="quantized checkpoint for --quant")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="latency of float and quantized inference")
    b.add_argument("--ckpt", required=True, help="float checkpoint (.tcsw)")
    b.add_argument("--frames", type=_positive_int, default=100, help="frames to time")
    b.add_argument("--data", help="dataset to draw frames from (default: simulated follow run)")
    b.add_argument("--qckpt", help="quantized checkpoint (default: calibrate on the frames)")
    b.add_argument("--seed", type=int, help="seed for the simulated frames")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("plot", help="SVG error curves and PGM heatmaps")
    g.add_argument("--report", required=True, help="report CSV from eval")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--metrics", help="training metrics CSV for loss/RMSE curves")
    g.add_argument("--ckpt", help="checkpoint for heatmap images")
    g.add_argument("--data", help="dataset for heatmap images")
    g.add_argument("--frame", type=int, default=1, help="frame index for heatmap images")
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and not args.dry_run and not (args.data and args.out):
        parser.error("train needs --data and --out")
    try:
        return args.func(args)
    except tcs_model.NonFiniteLoss as exc:
        print(f"tcs: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, sim.SchemaError, CheckpointError, tcs_model.EmptyDataset, quant.CalibrationError) as exc:
        print(f"tcs: bad data: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"tcs: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
