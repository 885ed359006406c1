import json
import subprocess
import sys

import pytest

from tinycenterspeed import cli, sim
from tinycenterspeed.bev import BevConfig
from tinycenterspeed.model import ModelConfig, TinyCenterSpeed, save_checkpoint

SUBCOMMANDS = ["simulate", "train", "eval", "infer", "bench", "plot"]


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def follow(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "follow.jsonl"
    assert run("simulate", "--scenario", "follow", "--duration", 2, "--seed", 1, "--out", path) == 0
    return path


@pytest.fixture(scope="module")
def ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("ckpt") / "m.tcsw"
    save_checkpoint(TinyCenterSpeed(ModelConfig(seed=0)).eval(), BevConfig(32, 0.2, 1.0), path)
    return path


@pytest.mark.parametrize("cmd", SUBCOMMANDS)
def test_help_documents_flags(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        run(cmd, "--help")
    assert exc.value.code == 0
    out = capsys.readouterr().out
    sub = cli.build_parser()._subparsers._group_actions[0].choices[cmd]
    for action in sub._actions:
        for flag in action.option_strings:
            assert flag in out


def test_usage_errors(tmp_path):
    out = tmp_path / "x.jsonl"
    for argv in (["simulate", "--scenario", "nope", "--duration", 1, "--out", out],
                 ["simulate", "--scenario", "follow", "--duration", 0, "--out", out],
                 ["simulate", "--scenario", "follow", "--duration", 1, "--out", out, "--bogus"],
                 ["train", "--epochs", 0, "--dry-run"]):
        with pytest.raises(SystemExit) as exc:
            run(*argv)
        assert exc.value.code == 2
    assert not out.exists()


def test_simulate_rate_times_duration(tmp_path):
    path = tmp_path / "d.jsonl"
    assert run("simulate", "--scenario", "duel", "--duration", 60, "--seed", 7, "--out", path) == 0
    ds = sim.read_dataset(path)
    assert len(ds.records) == 1500 and ds.rate == 25.0


def test_simulate_is_reproducible(tmp_path, monkeypatch):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    monkeypatch.setenv("TCS_SEED", "4")
    run("simulate", "--scenario", "static", "--duration", 1, "--out", a)
    run("simulate", "--scenario", "static", "--duration", 1, "--seed", 4, "--out", b)
    assert a.read_bytes() == b.read_bytes()


def test_simulate_io_error(tmp_path):
    assert run("simulate", "--scenario", "follow", "--duration", 1, "--out", tmp_path / "no" / "x.jsonl") == 3


def test_train_dry_run_defaults(capsys):
    assert run("train", "--dry-run") == 0
    cfg = dict(line.split(" = ") for line in capsys.readouterr().out.splitlines())
    assert (cfg["k"], cfg["p"], cfg["alpha"], cfg["batch_size"], cfg["weight_fn"], cfg["lr"]) == \
        ("64", "0.1", "0.99", "32", "x", "5e-05")


def test_train_seed_precedence(tmp_path, monkeypatch, capsys):
    conf = tmp_path / "c.cfg"
    conf.write_text("seed = 9\n")
    monkeypatch.setenv("TCS_SEED", "3")
    run("train", "--dry-run")
    assert "seed = 3" in capsys.readouterr().out
    run("train", "--dry-run", "--config", conf)
    assert "seed = 9" in capsys.readouterr().out
    run("train", "--dry-run", "--config", conf, "--seed", 1)
    assert "seed = 1" in capsys.readouterr().out


def test_train_bad_config_and_missing_data(tmp_path):
    conf = tmp_path / "c.cfg"
    conf.write_text("alpha = 3\n")
    assert run("train", "--dry-run", "--config", conf) == 2
    assert run("train", "--data", tmp_path / "missing.jsonl", "--out", tmp_path / "m.tcsw") == 3


def test_train_writes_artifacts(tmp_path, follow):
    conf = tmp_path / "c.cfg"
    conf.write_text("k = 32\np = 0.2\nepochs = 1\nbatch_size = 16\n")
    out = tmp_path / "m.tcsw"
    assert run("train", "--data", follow, "--config", conf, "--out", out) == 0
    assert out.exists() and out.with_suffix(".tcsq").exists()
    lines = out.with_suffix(".metrics.csv").read_text().splitlines()
    assert lines[0].startswith("epoch,train_loss") and len(lines) == 2


def test_eval_rows(tmp_path, follow, ckpt, capsys):
    report = tmp_path / "r.csv"
    assert run("eval", "--data", follow, "--ckpt", ckpt, "--quant", "--abd", "--track", "--out", report) == 0
    rows = list(__import__("csv").DictReader(open(report)))
    keys = [(r["method"], r["quant"], r["tracking"]) for r in rows]
    assert ("TinyCenterSpeed", "no", "no") in keys and ("TinyCenterSpeed", "yes", "no") in keys
    abd_trk = next(r for r in rows if r["method"] == "ABD" and r["tracking"] == "yes")
    abd_plain = next(r for r in rows if r["method"] == "ABD" and r["tracking"] == "no")
    assert abd_trk["mu_vs"] != "-" and abd_plain["mu_vs"] == "-"
    assert "impr%" in capsys.readouterr().out


def test_eval_without_ground_truth(tmp_path, follow):
    ds = sim.read_dataset(follow)
    bare = [sim.DatasetRecord(r.scan, r.ego, (), r.t) for r in ds.records]
    path = tmp_path / "bare.jsonl"
    sim.write_dataset(bare, path, ds.lidar, ds.rate)
    assert run("eval", "--data", path, "--abd", "--out", tmp_path / "r.csv") == 5
    assert run("eval", "--data", follow, "--out", tmp_path / "r.csv") == 2


def test_infer_one_line_per_frame(follow, ckpt, capsys):
    assert run("infer", "--scan-stream", follow, "--ckpt", ckpt) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == len(sim.read_dataset(follow).records)
    first = json.loads(lines[0])
    assert set(first) == {"t", "detections"}


def test_bench_reports_mu_sigma(ckpt, follow, capsys):
    assert run("bench", "--ckpt", ckpt, "--frames", 20, "--data", follow) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split(":")[0] for line in out] == ["float", "quant"]
    assert all(" ms  sigma " in line and line.rstrip().endswith("(n=20)") for line in out)


def test_plot_outputs(tmp_path, follow, ckpt):
    report = tmp_path / "r.csv"
    run("eval", "--data", follow, "--abd", "--track", "--out", report)
    metrics = tmp_path / "m.csv"
    metrics.write_text("epoch,train_loss,val_rmse_s,val_rmse_d,val_rmse_vs,val_rmse_vd\n1,2,0.1,0.1,0.5,nan\n"
                       "2,1,0.08,0.09,0.4,0.3\n")
    out = tmp_path / "fig"
    assert run("plot", "--report", report, "--out", out, "--metrics", metrics, "--ckpt", ckpt, "--data", follow) == 0
    assert (out / "errors.svg").read_text().startswith("<svg")
    for name in ("val_rmse.svg", "train_loss.svg", "heatmap_pos.pgm", "heatmap_v_x.pgm", "input_occupancy.pgm"):
        assert (out / name).exists()
    pgm = (out / "heatmap_pos.pgm").read_bytes()
    assert pgm.startswith(b"P5\n32 32\n255\n") and len(pgm) == len(b"P5\n32 32\n255\n") + 32 * 32


def test_plot_empty_report(tmp_path):
    report = tmp_path / "r.csv"
    report.write_text("method,quant,tracking\n")
    assert run("plot", "--report", report, "--out", tmp_path / "fig") == 5


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "tinycenterspeed.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout
