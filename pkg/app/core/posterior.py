"""
Individual-level inference for theta_i(t) under a fitted model.

All-linear models are handled in closed form. Models with ordinal items use the two-step
Gibbs sampler: latent responses given curve values (truncated normal), then curve values
given latent responses (multivariate normal). Both steps condition through
`EvidenceFactor`, treating each latent response as a linear item with loading -a,
offset 0 and unit noise.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.special import ndtri
from scipy.stats import truncnorm

from app.core.dataset import Dataset, DomainError, IndividualSeries
from app.core.gaussian import EvidenceFactor, GaussianSurrogate, conditional_grid, truncnorm_sample_many
from app.core.measurement import MeasurementError, MeasurementSpec
from app.core.model import ModelSpec
from app.utils import stream

logger = logging.getLogger(__name__)

DEFAULT_ALPHAS = (0.025, 0.975)
DEFAULT_SAMPLES = 100
DEFAULT_BURN_IN = 100
DEFAULT_GRID_POINTS = 200


def default_grid(horizon, n_points=DEFAULT_GRID_POINTS):
    return np.linspace(0.0, float(horizon), int(n_points))


def quantile_column(alpha):
    return f"q{int(round(1000 * alpha)):03d}"


@dataclass(frozen=True, eq=False)
class PosteriorCurve:
    """
    EAP curve and quantile curves on a grid. On the Monte Carlo path the quantiles are the
    average of conditional quantiles over draws, which is not the exact posterior quantile.
    """
    grid: np.ndarray
    mean: np.ndarray
    quantiles: Dict[float, np.ndarray]
    n_samples: int = 0
    mc_se: Optional[np.ndarray] = None

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.grid, "eap": self.mean})
        for alpha in sorted(self.quantiles):
            frame[quantile_column(alpha)] = self.quantiles[alpha]
        return frame


@dataclass(frozen=True, eq=False)
class GibbsState:
    """Curve values at the observation times and latent responses (S x J_ordinal, NaN where missing)."""
    theta: np.ndarray
    latent_y: np.ndarray


def linear_evidence(series: IndividualSeries, measurement: MeasurementSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Precision and score that the observed continuous responses put on each curve value."""
    precision = np.zeros(series.n_obs)
    score = np.zeros(series.n_obs)
    for j in measurement.linear_indices():
        item = measurement.items[j]
        y = series.responses[:, j]
        seen = ~np.isnan(y)
        precision[seen] += item.a ** 2 / item.sigma2
        score[seen] += item.a * (y[seen] - item.b) / item.sigma2
    return precision, score


def _check_alphas(alphas):
    alphas = tuple(float(a) for a in alphas)
    if any(not 0.0 < a < 1.0 for a in alphas):
        raise DomainError(f"quantile levels must lie in (0, 1): {alphas}")
    return alphas


class GibbsSampler:
    """Two-step Gibbs sampler for one individual under a fixed model."""

    def __init__(self, series: IndividualSeries, model: ModelSpec):
        measurement = model.measurement
        self.series = series
        self.model = model
        self.mean_spec = model.mean_for(series.group)
        self.kernel_spec = model.kernel_for(series.group)
        self.prior = GaussianSurrogate.from_model(self.mean_spec, self.kernel_spec, series.times)
        self.ordinal = measurement.ordinal_indices()
        self.loadings = np.array([measurement.items[j].a for j in self.ordinal])

        shape = (series.n_obs, len(self.ordinal))
        self.observed = np.zeros(shape, dtype=bool)
        self.lo = np.full(shape, -np.inf)
        self.hi = np.full(shape, np.inf)
        for k, j in enumerate(self.ordinal):
            y = series.responses[:, j]
            seen = ~np.isnan(y)
            self.observed[:, k] = seen
            if np.any(seen):
                self.lo[seen, k], self.hi[seen, k] = measurement.items[j].interval(y[seen])

        precision, self.linear_score = linear_evidence(series, measurement)
        precision = precision + self.observed @ (self.loadings ** 2)
        self.factor = EvidenceFactor(self.prior, precision)

    def initial_state(self) -> GibbsState:
        theta = self.prior.mean.copy()
        latent = np.full(self.observed.shape, np.nan)
        if self.ordinal:
            centers = -theta[:, None] * self.loadings[None, :]
            centers = np.broadcast_to(centers, self.observed.shape)
            seen = self.observed
            latent[seen] = truncnorm.mean(self.lo[seen] - centers[seen], self.hi[seen] - centers[seen]) + centers[seen]
        return GibbsState(theta, latent)

    def _score(self, latent):
        if not self.ordinal:
            return self.linear_score
        filled = np.where(self.observed, latent, 0.0)
        return self.linear_score - filled @ self.loadings

    def sweep(self, state: GibbsState, rng) -> GibbsState:
        latent = np.full(self.observed.shape, np.nan)
        if self.ordinal and np.any(self.observed):
            centers = np.broadcast_to(-state.theta[:, None] * self.loadings[None, :], self.observed.shape)
            seen = self.observed
            latent[seen] = truncnorm_sample_many(centers[seen], self.lo[seen], self.hi[seen], rng)
        theta = self.factor.sample(self._score(latent), rng)
        return GibbsState(theta, latent)

    def run(self, state: GibbsState, n_sweeps, rng) -> GibbsState:
        for _ in range(int(n_sweeps)):
            state = self.sweep(state, rng)
        return state

    def draws(self, n_samples, burn_in, rng, state: Optional[GibbsState] = None) -> np.ndarray:
        """(n_samples, S) curve values at the observation times after `burn_in` sweeps."""
        state = self.run(state or self.initial_state(), burn_in, rng)
        out = np.empty((int(n_samples), self.series.n_obs))
        for l in range(int(n_samples)):
            state = self.sweep(state, rng)
            out[l] = state.theta
        return out


def gibbs_sweep(state: GibbsState, series: IndividualSeries, model: ModelSpec, rng) -> GibbsState:
    return GibbsSampler(series, model).sweep(state, rng)


def posterior_analytic(series: IndividualSeries, model: ModelSpec, grid, alphas=DEFAULT_ALPHAS) -> PosteriorCurve:
    """Exact Gaussian conditioning on the continuous responses; quantile = mean + z_alpha * sd."""
    if not model.measurement.all_linear:
        raise MeasurementError("closed-form posterior needs an all-linear measurement model; use posterior_mc")
    alphas = _check_alphas(alphas)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    mean_spec = model.mean_for(series.group)
    kernel_spec = model.kernel_for(series.group)
    prior = GaussianSurrogate.from_model(mean_spec, kernel_spec, series.times)
    precision, score = linear_evidence(series, model.measurement)
    factor = EvidenceFactor(prior, precision)
    mean, variance = factor.predict(
        kernel_spec(series.times, grid), mean_spec.evaluate(grid), kernel_spec.diagonal(grid), score
    )
    sd = np.sqrt(variance)
    quantiles = {alpha: mean + ndtri(alpha) * sd for alpha in alphas}
    return PosteriorCurve(grid, mean, quantiles, 0)


def posterior_mc(series: IndividualSeries, model: ModelSpec, grid, alphas=DEFAULT_ALPHAS,
                 L=DEFAULT_SAMPLES, burn_in=DEFAULT_BURN_IN, rng=None) -> PosteriorCurve:
    """
    EAP(t*) = mean over draws of mu(theta^(l)); quantile(alpha, t*) = mean over draws of
    mu(theta^(l)) + z_alpha * sigma, with mu and sigma from conditioning on the drawn curve values.
    """
    if L < 1:
        raise DomainError(f"need at least one Monte Carlo sample, got {L}")
    if rng is None:
        raise DomainError("posterior_mc needs a random stream")
    alphas = _check_alphas(alphas)
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    sampler = GibbsSampler(series, model)
    draws = sampler.draws(L, burn_in, rng)
    conditional = conditional_grid(grid, series.times, sampler.mean_spec, sampler.kernel_spec)
    mus = conditional.mu(draws)
    eap = mus.mean(axis=0)
    sd = np.sqrt(conditional.sigma2)
    quantiles = {alpha: eap + ndtri(alpha) * sd for alpha in alphas}
    mc_se = mus.std(axis=0, ddof=1) / np.sqrt(L) if L > 1 else np.zeros(grid.size)
    return PosteriorCurve(grid, eap, quantiles, int(L), mc_se)


@dataclass(frozen=True)
class CurveOptions:
    alphas: Tuple[float, ...] = DEFAULT_ALPHAS
    samples: int = DEFAULT_SAMPLES
    burn_in: int = DEFAULT_BURN_IN
    grid_points: int = DEFAULT_GRID_POINTS
    force_mc: bool = False


def _one_curve(index, series, model, grid, options, seed):
    if model.measurement.all_linear and not options.force_mc:
        return posterior_analytic(series, model, grid, options.alphas)
    return posterior_mc(series, model, grid, options.alphas, options.samples, options.burn_in, stream(seed, index))


def infer_curves(dataset: Dataset, model: ModelSpec, ids: Optional[Sequence[str]] = None,
                 options: CurveOptions = CurveOptions(), seed=0, n_jobs=1, grid=None) -> List[Tuple[str, PosteriorCurve]]:
    """
    Posterior curves for the selected individuals, in dataset order. Random streams are keyed by
    each individual's position in the full dataset, so the selection does not change the draws.
    """
    grid = default_grid(dataset.time_horizon, options.grid_points) if grid is None else np.asarray(grid, float)
    wanted = None if not ids else set(ids)
    jobs = [(k, series) for k, series in enumerate(dataset.individuals)
            if wanted is None or series.individual_id in wanted]
    logger.info("inferring %d posterior curves on a %d-point grid", len(jobs), grid.size)
    curves = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_one_curve)(k, series, model, grid, options, seed) for k, series in jobs
    )
    return [(series.individual_id, curve) for (_, series), curve in zip(jobs, curves)]
