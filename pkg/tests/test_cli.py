import json

import pandas as pd
import pytest

from app.main import EXIT_INVALID, EXIT_IO, EXIT_NOT_CONVERGED, EXIT_OK, main

SMALL = """
seed: 11
threads: 1
data: {time_horizon: 2}
model:
  mean: {type: constant, coefficients: [1.5]}
  kernel: {type: se, c2: 0.4, kappa: 0.3}
  items: [{type: linear, a: 1.0, b: 0.0, sigma2: 0.1}]
  constraints: {scale: first_loading, location: first_item_location}
fit: {max_iter: 3}
curve: {grid_points: 9}
simulate: {N: 4, days: 2, per_day: 3, grid_points: 9}
"""


@pytest.fixture
def workspace(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "run.yaml").write_text(SMALL, encoding="utf-8")
    return tmp_path


def test_simulate_fit_curve_pipeline(workspace):
    assert main(["simulate", "--config", "run.yaml", "--out", "data/sim.csv"]) == EXIT_OK
    data = pd.read_csv(workspace / "data" / "sim.csv")
    assert list(data.columns) == ["id", "time", "y1"]
    assert len(data) == 4 * 2 * 3
    truth = json.loads((workspace / "data" / "sim.truth.json").read_text(encoding="utf-8"))
    assert truth["seed"] == 11
    assert (workspace / "data" / "sim.truth_grid.csv").exists()
    assert (workspace / "data" / "run_config.yaml").exists()

    code = main(["fit", "--config", "run.yaml", "--data", "data/sim.csv", "--out", "out/fit.json"])
    assert code in (EXIT_OK, EXIT_NOT_CONVERGED)
    report = json.loads((workspace / "out" / "fit.json").read_text(encoding="utf-8"))
    assert report["method"] == "em"
    assert report["estimates"]["a1"] == 1.0
    assert (workspace / "out" / "fit.trace.csv").exists()

    code = main(["curve", "--fit", "out/fit.json", "--data", "data/sim.csv", "--ids", "2",
                 "--out-dir", "curves", "--alphas", "0.1,0.9"])
    assert code == EXIT_OK
    curve = pd.read_csv(workspace / "curves" / "curve_2.csv")
    assert list(curve.columns) == ["t", "eap", "q100", "q900"]
    assert len(curve) == 9
    assert not (workspace / "curves" / "curve_1.csv").exists()

    runs = pd.read_csv(workspace / "logs" / "runs.csv")
    assert list(runs["command"]) == ["simulate", "fit", "curve"]


def test_seed_flag_changes_data(workspace):
    main(["simulate", "--config", "run.yaml", "--out", "a.csv"])
    main(["simulate", "--config", "run.yaml", "--out", "b.csv", "--seed", "12"])
    main(["simulate", "--config", "run.yaml", "--out", "c.csv"])
    a, b, c = (pd.read_csv(workspace / name) for name in ("a.csv", "b.csv", "c.csv"))
    pd.testing.assert_frame_equal(a, c)
    assert not a["y1"].equals(b["y1"])


def test_invalid_config_exit_code(workspace):
    (workspace / "bad.yaml").write_text("fit: {max_iters: 3}\n", encoding="utf-8")
    assert main(["simulate", "--config", "bad.yaml", "--out", "x.csv"]) == EXIT_INVALID
    runs = pd.read_csv(workspace / "logs" / "runs.csv")
    assert runs["status"].iloc[-1] == "invalid"


def test_missing_data_file_exit_code(workspace):
    assert main(["fit", "--config", "run.yaml", "--data", "nope.csv", "--out", "fit.json"]) == EXIT_IO


def test_unknown_curve_id(workspace):
    main(["simulate", "--config", "run.yaml", "--out", "sim.csv"])
    main(["fit", "--config", "run.yaml", "--data", "sim.csv", "--out", "fit.json"])
    code = main(["curve", "--fit", "fit.json", "--data", "sim.csv", "--ids", "99", "--out-dir", "curves"])
    assert code == EXIT_INVALID


def test_bootstrap_command_writes_intervals(workspace):
    main(["simulate", "--config", "run.yaml", "--out", "sim.csv"])
    code = main(["bootstrap", "--config", "run.yaml", "--data", "sim.csv", "--replicates", "3",
                 "--out-dir", "boot"])
    assert code == EXIT_OK
    replicates = pd.read_csv(workspace / "boot" / "replicates.csv", index_col=0)
    assert len(replicates) == 3
    ci = pd.read_csv(workspace / "boot" / "ci.csv")
    assert list(ci.columns) == ["parameter", "lower", "upper"]
    assert (ci["lower"] <= ci["upper"]).all()
    assert (workspace / "boot" / "run_config.yaml").exists()
