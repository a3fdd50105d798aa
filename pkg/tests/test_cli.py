import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from graphtrack import cli, experiment as ex
from graphtrack.dynamics import load_dataset

GOLDEN_CONFIG = Path(__file__).parent / "data" / "golden_config.json"

SMALL = ["--set", "nodes=6", "--set", "degree=2", "--set", "train_size=6", "--set", "test_size=4", "--set", "horizon=8"]
FAST_FILTERS = ["--set", "filters=ekf,gsp-ekf"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_simulate_writes_artifacts(tmp_path, capsys):
    assert run("simulate", "--out", tmp_path, *SMALL, "--csv") == 0
    doc = json.loads((tmp_path / "simulate.json").read_text())
    assert doc["command"] == "simulate"
    assert load_dataset(tmp_path / "train.gtds").hash() == doc["datasets"]["train"]
    assert load_dataset(tmp_path / "test.gtds").D == 4
    assert (tmp_path / "train_csv").is_dir()


def test_config_echo_matches_golden(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text("scenario = scenario1\nnodes = 6\ndegree = 2\ntrain_size = 6\ntest_size = 4\nhorizon = 8\nseed = 11\n")
    assert run("simulate", "--config", cfg, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "simulate.json").read_text())
    assert doc["config"] == json.loads(GOLDEN_CONFIG.read_text())
    assert ex.ExperimentConfig.from_mapping(doc["config"]).to_json() == doc["config"]
    text = ex.ExperimentConfig.from_mapping(doc["config"]).to_text()
    assert ex.ExperimentConfig.from_text(text).to_json() == doc["config"]


def test_exit_codes(tmp_path, capsys):
    assert run("eval", "--out", tmp_path / "missing", *SMALL) == 3
    assert "not found" in capsys.readouterr().err
    assert run("sweep", "--out", tmp_path, "--set", "filters=") == 2
    assert run("simulate", "--out", tmp_path, "--set", "bogus=1") == 2
    assert run("simulate", "--out", tmp_path, "--set", "nodes=abc") == 2
    assert run("simulate", "--config", tmp_path / "nope.cfg") == 3
    with pytest.raises(SystemExit) as ei:
        run("fly")
    assert ei.value.code == 2
    with pytest.raises(SystemExit) as ei:
        run("simulate", "--seed", "x")
    assert ei.value.code == 2
    assert run("bench", "--out", tmp_path, "--sizes", "10") == 2
    assert run("sweep", "--out", tmp_path, "--jobs", "0", *SMALL, *FAST_FILTERS) == 2


def test_train_then_eval(tmp_path):
    common = [*SMALL, "--set", "epochs=1", "--set", "window=4", "--set", "zero_output_init=true", "--out", tmp_path]
    assert run("simulate", *common) == 0
    assert run("train", *common) == 0
    tr = json.loads((tmp_path / "train.json").read_text())
    assert tr["command"] == "train" and len(tr["epochs"]) == 2
    assert run("eval", *common) == 0
    ev = json.loads((tmp_path / "eval.json").read_text())
    assert set(ev["mse"]) == {"ekf", "gsp-ekf", "gsp-kalmannet"}
    assert ev["config"] == tr["config"]
    assert "timing" in ev


def test_sweep_csv_schema_golden(tmp_path):
    assert run("sweep", "--out", tmp_path, *SMALL, *FAST_FILTERS, "--set", "sweep=0,10") == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "noise_param,filter,mse_db,mse_linear,seed,status"
    assert len(lines) == 1 + 2 * 2
    doc = json.loads((tmp_path / "sweep.json").read_text())
    assert doc["csv_schema"] == "sweep/1" and doc["columns"] == ex.SWEEP_COLUMNS


def test_bench_csv_schema_golden(tmp_path):
    argv = ["bench", "--out", tmp_path, "--sizes", "6,10", "--set", "bench_runs=1", "--set", "bench_horizon=5", "--set", "degree=2"]
    assert run(*argv) == 0
    text = (tmp_path / "bench.csv").read_text()
    assert text.splitlines()[0] == "n,filter,median_seconds,runs,status"
    rows = list(csv.DictReader(io.StringIO(text)))
    assert {r["filter"] for r in rows} == {"ekf", "gsp-ekf", "gsp-kalmannet"}
    assert all(r["status"] == "ok" for r in rows)
    doc = json.loads((tmp_path / "bench.json").read_text())
    assert set(doc["timing"]["slopes"]) == {"ekf", "gsp-ekf", "gsp-kalmannet"}


def test_single_point_sweep_equals_eval(tmp_path):
    common = [*SMALL, *FAST_FILTERS, "--set", "noise_level=10", "--set", "sweep=10"]
    assert run("simulate", "--out", tmp_path / "e", *common) == 0
    assert run("eval", "--out", tmp_path / "e", *common) == 0
    assert run("sweep", "--out", tmp_path / "s", *common) == 0
    ev = json.loads((tmp_path / "e" / "eval.json").read_text())
    rows = json.loads((tmp_path / "s" / "sweep.json").read_text())["rows"]
    for r in rows:
        assert r["mse_linear"] == ev["mse"][r["filter"]]["linear"]


def test_ekf_sweep_monotone(tmp_path):
    argv = ["sweep", "--out", tmp_path, "--set", "filters=ekf", "--set", "test_size=40", "--set", "train_size=2", "--set", "horizon=100"]
    assert run(*argv) == 0
    rows = json.loads((tmp_path / "sweep.json").read_text())["rows"]
    mse = [r["mse_db"] for r in sorted(rows, key=lambda r: r["noise_param"])]
    assert len(mse) == 5 and all(b <= a for a, b in zip(mse, mse[1:]))


def test_seed_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv(ex.SEED_ENV, "123")
    assert run("simulate", "--out", tmp_path / "env", *SMALL) == 0
    assert json.loads((tmp_path / "env" / "simulate.json").read_text())["config"]["seed"] == 123
    assert run("simulate", "--out", tmp_path / "flag", *SMALL, "--seed", "5") == 0
    assert json.loads((tmp_path / "flag" / "simulate.json").read_text())["config"]["seed"] == 5
    monkeypatch.delenv(ex.SEED_ENV)
    assert run("simulate", "--out", tmp_path / "none", *SMALL) == 0
    assert json.loads((tmp_path / "none" / "simulate.json").read_text())["config"]["seed"] == 0
    monkeypatch.setenv(ex.SEED_ENV, "abc")
    assert run("simulate", "--out", tmp_path / "bad", *SMALL) == 2


def test_jobs_do_not_change_results(tmp_path):
    common = [*SMALL, *FAST_FILTERS, "--set", "sweep=0,10,20"]
    assert run("sweep", "--out", tmp_path / "a", *common, "--jobs", "1") == 0
    assert run("sweep", "--out", tmp_path / "b", *common, "--jobs", "3") == 0
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_sweep_records_point_failures(monkeypatch):
    from graphtrack.errors import NonFiniteLoss

    def diverge(*a, **k):
        raise NonFiniteLoss("loss is nan", epoch=1, batch=0)

    monkeypatch.setattr(ex, "train", diverge)
    cfg = ex.ExperimentConfig(nodes=6, degree=2, train_size=3, test_size=2, horizon=5, filters=["gsp-kalmannet", "ekf"], sweep=[0.0, 20.0])
    rows, _ = ex.sweep(cfg)
    assert [r["filter"] for r in rows] == ["gsp-kalmannet", "ekf"] * 2
    assert [r["status"] for r in rows[1::2]] == ["ok", "ok"]
    assert all(r["status"].startswith("error: NonFiniteLoss") for r in rows[::2])
    assert all(np.isnan(r["mse_db"]) for r in rows[::2])


def test_mismatch_parsing():
    cfg = ex.ExperimentConfig(mismatch="drop_edges:2+evolution_rate:10:9")
    kinds = [s.kind for s in cfg.mismatch_specs()]
    assert kinds == ["drop_edges", "evolution_rate"]
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig(mismatch="drop_edges")
    with pytest.raises(ex.ConfigError):
        ex.ExperimentConfig(scenario="scenario9")


def test_child_seeds_are_distinct_and_stable():
    seeds = {s: ex.child_seed(0, s) for s in ("graph", "train", "data-train", "data-test", "mismatch", "bench")}
    assert len(set(seeds.values())) == 6
    assert ex.child_seed(0, "graph") == seeds["graph"]
    assert ex.child_seed(0, "data-train", 1) != ex.child_seed(0, "data-train", 0)


def test_fit_slopes():
    rows = [{"n": n, "filter": "x", "median_seconds": 2.0 * n**2, "status": "ok"} for n in (10, 20, 40)]
    assert ex.fit_slopes(rows)["x"] == pytest.approx(2.0)


def test_bench_repeat_gives_identical_mse():
    cfg = ex.ExperimentConfig(sizes=[6, 10], bench_runs=1, bench_horizon=5, degree=2)
    assert ex.bench(cfg)[1]["mse"] == ex.bench(cfg)[1]["mse"]
