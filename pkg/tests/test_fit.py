from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from app.core.dataset import Dataset, IndividualSeries, ItemType
from app.core.fit import (
    FitError,
    FitOptions,
    complete_data_objective,
    fit,
    fit_em_linear,
    fit_grouped,
    fit_stem,
    marginal_loglik,
)
from app.core.gaussian import GaussianSurrogate, mvn_sample
from app.core.kernels import SquaredExponential
from app.core.mean_basis import ConstantBasis, MeanSpec
from app.core.measurement import LinearFactorItem, MeasurementError, MeasurementSpec
from app.core.model import ConstraintSet, ModelSpec, ParameterMap
from app.core.simulate import SimConfig, simulate_dataset


def test_loglik_one_observation(study1_model):
    dataset = Dataset((IndividualSeries("1", [2.0], [[1.1]]),), (ItemType.continuous(),), 10.0)
    expected = stats.norm(1.5, np.sqrt(0.4 + 0.1)).logpdf(1.1)
    assert marginal_loglik(dataset, study1_model) == pytest.approx(expected, rel=1e-10)


def test_loglik_matches_dense_gaussian():
    model = ModelSpec.single(
        MeanSpec(ConstantBasis(5.0), (0.4,)),
        SquaredExponential(0.9, 0.6),
        MeasurementSpec((LinearFactorItem(1.0, 0.0, 0.2), LinearFactorItem(0.7, 0.3, 0.5))),
    )
    times = np.array([0.3, 0.8, 1.9, 2.4])
    responses = np.array([[0.5, 0.1], [np.nan, 0.9], [1.2, np.nan], [0.4, 0.6]])
    dataset = Dataset((IndividualSeries("1", times, responses),), (ItemType.continuous(),) * 2, 5.0)

    # stack observed responses and build their joint covariance directly
    k = model.kernel(times, times)
    rows, loads, offsets, noise = [], [], [], []
    for j, item in enumerate(model.measurement.items):
        for s in range(times.size):
            if not np.isnan(responses[s, j]):
                rows.append(s)
                loads.append(item.a)
                offsets.append(item.b)
                noise.append(item.sigma2)
    rows, loads = np.array(rows), np.array(loads)
    y = responses.T[~np.isnan(responses.T)]
    mean = loads * 0.4 + np.array(offsets)
    cov = np.outer(loads, loads) * k[np.ix_(rows, rows)] + np.diag(noise)
    expected = stats.multivariate_normal(mean, cov).logpdf(y)
    assert marginal_loglik(dataset, model) == pytest.approx(expected, rel=1e-9)


def test_em_never_decreases_loglik(study1_model, study1_data):
    result = fit_em_linear(study1_data, study1_model, FitOptions(max_iter=15, tol=1e-9))
    loglik = result.trace["loglik"].to_numpy()
    assert np.all(np.diff(loglik) >= -1e-6 * np.abs(loglik[1:]))


def test_em_recovers_study1_truths(study1_model, study1_data):
    result = fit(study1_data, study1_model, FitOptions(max_iter=300, tol=1e-6))
    estimates = result.estimates
    assert result.method == "em"
    assert estimates["a1"] == 1.0 and estimates["b1"] == 0.0
    assert estimates["alpha0"] == pytest.approx(1.5, abs=0.25)
    assert estimates["c2"] == pytest.approx(0.4, abs=0.15)
    assert estimates["kappa"] == pytest.approx(0.3, abs=0.1)
    assert estimates["sigma2_1"] == pytest.approx(0.1, abs=0.04)
    assert result.loglik == pytest.approx(marginal_loglik(study1_data, result.psi_hat))


def test_identification_conventions_reach_the_same_maximum(study1_model, study1_data):
    opts = FitOptions(max_iter=2000, tol=1e-8)
    loading = fit_em_linear(study1_data, study1_model, opts)
    alternative = replace(study1_model, constraints=ConstraintSet(scale="kernel_scale", location="intercept_zero"))
    scale = fit_em_linear(study1_data, alternative, opts)
    assert scale.estimates["c2"] == 1.0 and scale.estimates["alpha0"] == 0.0
    assert scale.loglik == pytest.approx(loading.loglik, abs=1e-3)
    # same curve variance and level on the response scale
    assert scale.estimates["a1"] ** 2 == pytest.approx(loading.estimates["c2"], rel=0.02)
    assert scale.estimates["b1"] == pytest.approx(loading.estimates["alpha0"], abs=0.02)


def test_stem_agrees_with_em_on_linear_data(study1_model):
    data = simulate_dataset(SimConfig(N=120, days=10, per_day=4, model=study1_model, seed=404))[0]
    em = fit_em_linear(data, study1_model, FitOptions(max_iter=1000, tol=1e-7))
    stem = fit_stem(data, study1_model, FitOptions(method="stem", m0=100, m=400, sweeps=5, seed=11))
    for name in ("alpha0", "c", "c2", "kappa", "sigma2_1"):
        assert stem.estimates[name] == pytest.approx(em.estimates[name], abs=0.02), name


def test_em_result_report(study1_model, study1_data):
    result = fit(study1_data, study1_model, FitOptions(max_iter=2))
    report = result.report()
    assert report["method"] == "em"
    assert report["fixed"] == ["a1", "b1"]
    assert "c2" in report["estimates"]
    assert report["n_iter"] == len(result.trace) - 1


def test_complete_data_gradient(study2_model, study2_data):
    rng = np.random.default_rng(0)
    thetas = [mvn_sample(GaussianSurrogate.from_model(study2_model.mean, study2_model.kernel, s.times), rng)
              for s in study2_data.individuals]
    pmap = ParameterMap(study2_model)
    x = pmap.forward(study2_model)
    value, grad = complete_data_objective(study2_data, study2_model, thetas, pmap, x)
    assert np.isfinite(value)
    h = 1e-6
    for p in range(x.size):
        up, down = x.copy(), x.copy()
        up[p] += h
        down[p] -= h
        numeric = (complete_data_objective(study2_data, study2_model, thetas, pmap, up)[0]
                   - complete_data_objective(study2_data, study2_model, thetas, pmap, down)[0]) / (2 * h)
        assert grad[p] == pytest.approx(numeric, rel=1e-4, abs=1e-4)


def test_stem_runs_budget_and_keeps_constraints(study2_model, study2_data):
    opts = FitOptions(m0=3, m=4, sweeps=2, seed=5)
    result = fit(study2_data, study2_model, opts)
    assert result.method == "stem"
    assert result.n_iter == 7
    assert len(result.trace) == 7
    first = result.psi_hat.measurement.items[0]
    assert first.a == 1.0 and first.thresholds[0] == 0.0
    for item in result.psi_hat.measurement.items:
        assert np.all(np.diff(item.thresholds) > 0)


def test_stem_is_reproducible_across_threads(study2_model, study2_data):
    opts = FitOptions(m0=2, m=2, sweeps=2, seed=9)
    serial = fit_stem(study2_data, study2_model, opts)
    threaded = fit_stem(study2_data, study2_model, replace(opts, n_jobs=2))
    assert serial.estimates == threaded.estimates


def test_grouped_fit_estimates_each_group(grouped_model, grouped_data):
    result = fit(grouped_data, grouped_model, FitOptions(max_iter=20))
    assert {"c2[0]", "c2[1]", "kappa[0]", "alpha0[1]"} <= set(result.estimates)


def test_grouped_fit_needs_labels(grouped_model, study1_data):
    with pytest.raises(FitError):
        fit_grouped(study1_data, grouped_model)


def test_invalid_options():
    with pytest.raises(FitError):
        FitOptions(method="newton")
    with pytest.raises(FitError):
        FitOptions(max_iter=0)


def test_em_rejects_ordinal_items(study2_model, study2_data):
    with pytest.raises(MeasurementError):
        fit_em_linear(study2_data, study2_model)
