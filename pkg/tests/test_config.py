import json
import os

import numpy as np
import pytest

from app.core.config import ConfigError, RunConfig, build_model, load_config, model_to_dict
from app.core.kernels import Periodic, SquaredExponential
from app.core.measurement import ProbitItem
from app.core.model import parameter_table

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def test_shipped_settings_are_study1():
    config = load_config(os.path.join(ROOT, "settings.json"))
    model = config.model(25.0)
    table = parameter_table(model)
    assert table["alpha0"] == pytest.approx(1.5)
    assert table["c2"] == pytest.approx(0.4)
    assert table["kappa"] == pytest.approx(0.3)
    assert table["sigma2_1"] == pytest.approx(0.1)
    sim = config.sim_config()
    assert (sim.N, sim.days, sim.per_day) == (100, 25, 4)


def test_shipped_study2_config():
    config = load_config(os.path.join(ROOT, "configs", "study2.yaml"))
    model = config.model(25.0)
    assert all(isinstance(item, ProbitItem) for item in model.measurement.items)
    assert model.measurement.items[3].thresholds == (-0.27, 1.37)
    opts = config.fit_options()
    assert (opts.method, opts.m0, opts.m) == ("stem", 100, 200)


def test_shipped_grouped_config():
    config = load_config(os.path.join(ROOT, "configs", "grouped.yaml"))
    model = config.model(25.0)
    assert model.is_grouped
    assert parameter_table(model)["c2[1]"] == pytest.approx(0.44)
    assert config.contrasts() == {"c1sq - c0sq": ("c2[1]", "c2[0]")}
    assert config.csv_schema().group_column == "group"


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match="fit.max_iters"):
        RunConfig.from_dict({"fit": {"max_iters": 3}})
    with pytest.raises(ConfigError, match="model.kernel.lengthscale"):
        RunConfig.from_dict({"model": {"kernel": {"lengthscale": 1.0}}})


def test_unknown_kernel_type():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"kernel": {"type": "matern"}}})


def test_overrides_use_dotted_keys():
    config = RunConfig.from_dict({"fit": {"max_iter": 10}})
    changed = config.with_overrides({"fit.max_iter": 3, "seed": 5, "curve.samples": None})
    assert changed.fit_options().max_iter == 3
    assert changed.seed == 5
    assert "samples" not in changed.section("curve")
    assert config.fit_options().max_iter == 10


def test_build_model_variants():
    model = build_model({
        "mean": {"type": "polynomial", "degree": 2, "coefficients": [1.0, 0.1, -0.01]},
        "kernel": {"type": "periodic", "c": 0.5, "kappa": 1.0, "period": 7.0},
        "items": [{"type": "linear", "a": 1.0, "b": 0.0, "sigma2": 0.2}, {"type": "probit", "levels": 4}],
    }, 28.0)
    assert isinstance(model.kernel, Periodic)
    assert model.measurement.items[1].n_levels == 3


def test_spline_knots_from_pooled_times():
    times = np.linspace(0, 20, 201)
    model = build_model({"mean": {"type": "cubic_spline", "n_knots": 3}, "items": [{}]}, 20.0, times)
    assert model.mean.basis.knots == pytest.approx((5.0, 10.0, 15.0))


def test_model_round_trip():
    cfg = {
        "groups": ["a", "b"],
        "mean": {"type": "constant", "coefficients": [0.3]},
        "kernel": {"by_group": {"a": {"c2": 0.25, "kappa": 0.2}, "b": {"c2": 0.5, "kappa": 0.4}}},
        "items": [{"type": "linear", "a": 1.0, "b": 0.0, "sigma2": 0.1}],
        "constraints": {"scale": "first_loading", "location": "first_item_location"},
    }
    model = build_model(cfg, 10.0)
    again = build_model(json.loads(json.dumps(model_to_dict(model))), 10.0)
    assert parameter_table(again) == pytest.approx(parameter_table(model))
    assert isinstance(again.kernels[1], SquaredExponential)


def test_by_group_must_cover_groups():
    cfg = {"groups": ["a", "b"], "kernel": {"by_group": {"a": {}}}, "items": [{}]}
    with pytest.raises(ConfigError):
        build_model(cfg, 10.0)


def test_both_c_and_c2_rejected():
    with pytest.raises(ConfigError):
        build_model({"kernel": {"c": 1.0, "c2": 1.0}, "items": [{}]}, 10.0)


def test_grouped_data_needs_group_column():
    config = RunConfig.from_dict({"model": {"groups": ["0", "1"], "items": [{}]}})
    with pytest.raises(ConfigError):
        config.csv_schema()


def test_yaml_and_json_load(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text("seed: 3\nfit:\n  tol: 1.0e-4\n", encoding="utf-8")
    config = load_config(str(path))
    assert config.seed == 3
    assert config.fit_options().tol == pytest.approx(1e-4)
    assert "seed: 3" in config.dump()

    bad = tmp_path / "bad.yaml"
    bad.write_text("- 1\n- 2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(bad))
