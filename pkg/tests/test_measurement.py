import numpy as np
import pytest
from scipy.stats import norm

from app.core.dataset import DataFormatError, ItemType
from app.core.measurement import (
    LinearFactorItem,
    MeasurementError,
    MeasurementSpec,
    ProbitItem,
    item_logdensity,
    item_sample,
    latent_response_interval,
    probit_logprob,
    response_logdensity,
)

STUDY2_FIRST = ProbitItem(1.0, (0.0, 1.84))


def test_binary_probit_at_zero():
    assert item_logdensity(ProbitItem(1.0, (0.0,)), 0, 0.0) == pytest.approx(np.log(0.5))


def test_linear_zero_residual():
    item = LinearFactorItem(1.0, 0.0, 0.1)
    assert item_logdensity(item, 0.7, 0.7) == pytest.approx(-0.5 * np.log(2 * np.pi * 0.1))


def test_missing_contributes_nothing():
    assert item_logdensity(STUDY2_FIRST, np.nan, 0.3) == 0.0
    assert item_logdensity(LinearFactorItem(1.0, 0.0, 1.0), None, 0.3) == 0.0


def test_response_type_must_match_item():
    with pytest.raises(DataFormatError):
        item_logdensity(STUDY2_FIRST, 0.4, 0.0)
    with pytest.raises(DataFormatError):
        item_logdensity(LinearFactorItem(1.0, 0.0, 0.1), 2, 0.0)
    with pytest.raises(MeasurementError):
        item_logdensity(STUDY2_FIRST, 3, 0.0)
    assert item_logdensity(STUDY2_FIRST, np.float64(1.0), 0.0) == pytest.approx(item_logdensity(STUDY2_FIRST, 1, 0.0))


@pytest.mark.parametrize("item", [STUDY2_FIRST, ProbitItem(0.53, (0.34, 1.55)), ProbitItem(-1.2, (-1.0, 0.0, 2.0))])
def test_probabilities_sum_to_one(item):
    theta = np.linspace(-6, 6, 121)
    np.testing.assert_allclose(item.probabilities(theta).sum(axis=-1), 1.0, atol=1e-12)


def test_latent_intervals():
    assert latent_response_interval(STUDY2_FIRST, 0) == (-np.inf, 0.0)
    assert latent_response_interval(STUDY2_FIRST, 1) == (0.0, 1.84)
    assert latent_response_interval(STUDY2_FIRST, 2) == (1.84, np.inf)
    with pytest.raises(MeasurementError):
        latent_response_interval(STUDY2_FIRST, 3)
    with pytest.raises(MeasurementError):
        latent_response_interval(LinearFactorItem(1.0, 0.0, 1.0), 0)


def test_latent_response_matches_mass_function():
    item = ProbitItem(0.65, (-0.25, 0.44))
    theta = 0.9
    for level in range(3):
        lo, hi = latent_response_interval(item, level)
        centre = -item.a * theta
        direct = norm.cdf(hi - centre) - norm.cdf(lo - centre)
        assert np.exp(item_logdensity(item, level, theta)) == pytest.approx(direct, abs=1e-12)


def test_sampler_frequencies_match_probabilities():
    item = ProbitItem(0.62, (-0.27, 1.37))
    rng = np.random.default_rng(2020)
    n = 100_000
    draws = item.sample(np.full(n, 0.7), rng)
    p = item.probabilities(0.7)
    freq = np.bincount(draws.astype(int), minlength=3) / n
    se = np.sqrt(p * (1 - p) / n)
    assert np.all(np.abs(freq - p) < 3 * se + 1e-12)


def test_sampler_and_mass_function_share_direction():
    item = ProbitItem(1.0, (0.0, 1.84))
    rng = np.random.default_rng(1)
    low = item.sample(np.full(20000, -1.0), rng).mean()
    high = item.sample(np.full(20000, 1.0), rng).mean()
    levels = np.arange(3)
    expected_low = item.probabilities(-1.0) @ levels
    expected_high = item.probabilities(1.0) @ levels
    assert (high - low) * (expected_high - expected_low) > 0
    assert low == pytest.approx(expected_low, abs=0.03)


def test_degenerate_noise():
    item = LinearFactorItem(2.0, 0.5, 1e-12)
    assert item_sample(item, 1.5, np.random.default_rng(0)) == pytest.approx(3.5, abs=1e-5)


def test_fixed_seed_is_deterministic():
    item = ProbitItem(1.0, (0.0, 1.0))
    a = item.sample(np.linspace(-1, 1, 50), np.random.default_rng(5))
    b = item.sample(np.linspace(-1, 1, 50), np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)


def test_tail_probabilities_do_not_underflow_to_nan():
    value = probit_logprob(np.array([40.0]), np.array([np.inf]))
    assert np.isfinite(value[0]) or value[0] == -np.inf
    assert probit_logprob(np.array([8.0]), np.array([9.0]))[0] < -30


def test_natural_gradient_matches_finite_differences():
    item = ProbitItem(0.8, (-0.5, 0.7, 1.6))
    y = np.array([0, 1, 2, 3])
    theta = np.array([0.3, -0.4, 1.1, -0.2])
    grad = item.natural_gradient(y, theta)
    h = 1e-6
    base = np.array(item.natural())
    for p in range(base.size):
        up, down = base.copy(), base.copy()
        up[p] += h
        down[p] -= h
        numeric = (item.with_natural(up).logprob(y, theta) - item.with_natural(down).logprob(y, theta)) / (2 * h)
        np.testing.assert_allclose(grad[:, p], numeric, rtol=1e-5, atol=1e-7)


def test_free_parameters_keep_thresholds_ordered():
    item = ProbitItem(1.0, (0.45, 1.45))
    x = item.free_params()
    x[2] = -40.0
    moved = item.with_free_params(x)
    assert moved.thresholds[1] > moved.thresholds[0]
    np.testing.assert_allclose(item.with_free_params(item.free_params()).thresholds, item.thresholds)


def test_joint_density_is_sum_of_items():
    spec = MeasurementSpec((LinearFactorItem(1.0, 0.0, 0.1), STUDY2_FIRST))
    values = np.array([0.4, 2.0])
    expected = item_logdensity(spec.items[0], 0.4, 0.2) + item_logdensity(spec.items[1], 2, 0.2)
    assert response_logdensity(spec, values, 0.2) == pytest.approx(expected)


def test_spec_checks_item_types():
    spec = MeasurementSpec((LinearFactorItem(1.0, 0.0, 0.1), STUDY2_FIRST))
    spec.check((ItemType.continuous(), ItemType.ordinal(2)))
    with pytest.raises(MeasurementError):
        spec.check((ItemType.continuous(), ItemType.ordinal(3)))
    with pytest.raises(MeasurementError):
        spec.check((ItemType.continuous(),))
    assert spec.names() == ("a1", "b1", "sigma2_1", "a2", "b2_1", "b2_2")
