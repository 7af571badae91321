"""
Population-level maximum likelihood for latent curve models.

All-linear models use EM with a closed-form E-step. Models with ordinal items use stochastic EM:
a few Gibbs sweeps per individual replace the E-step, and the estimate is the average of the
parameter iterates over the last m iterations.

The M-step is blockwise. Linear items have closed-form updates, probit items and the structural
block (mean coefficients and kernel parameters, per group) use L-BFGS-B on the free vector of
`ParameterMap`. A block update is kept only if it does not lower the expected complete-data
log-likelihood.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.optimize import minimize
from tqdm import trange

from app.core.dataset import Dataset, LGPError, NumericalError
from app.core.gaussian import LOG_2PI, EvidenceFactor, GaussianSurrogate
from app.core.kernels import gram
from app.core.measurement import LinearFactorItem, MeasurementError, ProbitItem
from app.core.model import (
    ModelSpec,
    ParameterMap,
    fixed_parameter_names,
    initial_model,
    model_groups_for,
    parameter_table,
)
from app.core.posterior import GibbsSampler, linear_evidence
from app.utils import DEFAULT_SEED, stream

logger = logging.getLogger(__name__)

SIGMA2_FLOOR = 1e-8
PENALTY = 1e20
ASCENT_TOLERANCE = 1e-8


class FitError(LGPError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration


@dataclass(frozen=True)
class FitOptions:
    method: str = "auto"
    max_iter: int = 500
    tol: float = 1e-6
    m0: int = 100
    m: int = 200
    sweeps: int = 5
    seed: int = DEFAULT_SEED
    n_jobs: int = 1
    start: str = "data"
    random_init: bool = False
    progress: bool = False

    METHODS = ("auto", "em", "stem")
    STARTS = ("data", "model")

    def __post_init__(self):
        if self.method not in self.METHODS:
            raise FitError(f"unknown fit method {self.method!r}; choose from {self.METHODS}")
        if self.start not in self.STARTS:
            raise FitError(f"unknown start {self.start!r}; choose from {self.STARTS}")
        if self.max_iter < 1 or self.m < 1 or self.m0 < 0 or self.sweeps < 1:
            raise FitError("max_iter, m and sweeps must be >= 1 and m0 >= 0")


@dataclass(frozen=True, eq=False)
class FitResult:
    psi_hat: ModelSpec
    method: str
    loglik: Optional[float]
    trace: pd.DataFrame
    converged: bool
    reason: str
    n_iter: int
    m0: int = 0
    m: int = 0
    seed: Optional[int] = None
    objective: Optional[float] = None

    @property
    def estimates(self) -> Dict[str, float]:
        return parameter_table(self.psi_hat)

    def report(self) -> dict:
        constraints = self.psi_hat.constraints
        return {
            "method": self.method,
            "estimates": self.estimates,
            "fixed": fixed_parameter_names(self.psi_hat),
            "constraints": {"scale": constraints.scale, "location": constraints.location},
            "loglik": self.loglik,
            "objective": self.objective,
            "converged": self.converged,
            "reason": self.reason,
            "n_iter": self.n_iter,
            "m0": self.m0,
            "m": self.m,
            "seed": self.seed,
            "trace": {"rows": int(len(self.trace)), "columns": list(self.trace.columns)},
        }


@dataclass(frozen=True, eq=False)
class _Moments:
    """Posterior (or drawn) curve values at one individual's observation times."""
    times: np.ndarray
    mean: np.ndarray
    cov: Optional[np.ndarray]
    mean_index: int
    kernel_index: int


def _component_indices(model: ModelSpec, group):
    g = model.group_index(group) if model.is_grouped else 0
    return min(g, len(model.means) - 1), min(g, len(model.kernels) - 1)


def _check_inputs(dataset: Dataset, model: ModelSpec):
    model.measurement.check(dataset.item_types)
    model_groups_for(dataset, model)


# --- closed-form pieces for all-linear models -------------------------------------------------

def _evidence_loglik(series, measurement, prior, factor, score):
    n, logdet_r, quad = 0, 0.0, 0.0
    for j in measurement.linear_indices():
        item = measurement.items[j]
        y = series.responses[:, j]
        seen = ~np.isnan(y)
        resid = y[seen] - item.b - item.a * prior.mean[seen]
        n += int(seen.sum())
        logdet_r += seen.sum() * np.log(item.sigma2)
        quad += float(resid @ resid) / item.sigma2
    return -0.5 * (n * LOG_2PI + logdet_r + quad + factor.logdet_m() + factor.quadratic(score))


def _linear_estep(series, model):
    mean_index, kernel_index = _component_indices(model, series.group)
    prior = GaussianSurrogate.from_model(model.means[mean_index], model.kernels[kernel_index], series.times)
    precision, score = linear_evidence(series, model.measurement)
    factor = EvidenceFactor(prior, precision)
    loglik = _evidence_loglik(series, model.measurement, prior, factor, score)
    moments = _Moments(series.times, factor.mean(score), factor.covariance(), mean_index, kernel_index)
    return moments, loglik


def _run_estep(dataset, model, n_jobs):
    out = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_linear_estep)(series, model) for series in dataset.individuals
    )
    moments = [m for m, _ in out]
    loglik = float(sum(ll for _, ll in out))
    if not np.isfinite(loglik):
        raise NumericalError("non-finite marginal log-likelihood")
    return moments, loglik


def marginal_loglik(dataset: Dataset, model: ModelSpec, n_jobs=1) -> float:
    """Exact log-likelihood with the latent curves integrated out (all-linear models only)."""
    if not model.measurement.all_linear:
        raise MeasurementError("closed-form marginal likelihood needs an all-linear measurement model")
    _check_inputs(dataset, model)
    return _run_estep(dataset, model, n_jobs)[1]


def _item_stats(dataset, moments, j):
    """n, sum y, sum y^2, sum m, sum (m^2 + v), sum y m over the observed responses of item j."""
    stats = np.zeros(6)
    for series, moment in zip(dataset.individuals, moments):
        y = series.responses[:, j]
        seen = ~np.isnan(y)
        if not np.any(seen):
            continue
        y, m = y[seen], moment.mean[seen]
        v = np.diag(moment.cov)[seen] if moment.cov is not None else 0.0
        stats += [y.size, y.sum(), y @ y, m.sum(), np.sum(m * m + v), y @ m]
    return stats


def _update_linear(item: LinearFactorItem, stats, fix_a, fix_b) -> LinearFactorItem:
    n, sy, syy, sm, smm, sym = stats
    if n == 0:
        return item
    a, b = item.a, item.b
    if not fix_a and not fix_b:
        det = smm * n - sm * sm
        if det > 1e-12 * max(1.0, smm * n):
            a = (n * sym - sm * sy) / det
            b = (smm * sy - sm * sym) / det
    elif not fix_a:
        a = (sym - b * sm) / smm if smm > 0 else a
    elif not fix_b:
        b = (sy - a * sm) / n
    sigma2 = (syy - 2 * a * sym - 2 * b * sy + a * a * smm + 2 * a * b * sm + n * b * b) / n
    return LinearFactorItem(a, b, max(sigma2, SIGMA2_FLOOR))


def _measurement_step_linear(dataset, model, pmap, moments):
    items = list(model.measurement.items)
    for j in model.measurement.linear_indices():
        fixed = {k for k, _ in pmap.block("item", j).fixed}
        items[j] = _update_linear(items[j], _item_stats(dataset, moments, j), 0 in fixed, 1 in fixed)
    return model.with_components(measurement=model.measurement.with_items(items))


# --- structural block ----------------------------------------------------------------------------

def _prior_terms(mean_spec, kernel, cases):
    """
    Sum over cases of 0.5 [logdet K + tr(K^-1 E)], E = V + r r', r = curve - mean, with gradients
    in the scaled mean coefficients and in the kernel's free parameters.
    """
    beta = mean_spec.scaled_coefficients()
    value = 0.0
    grad_mean = np.zeros(beta.size)
    grad_kernel = np.zeros(len(kernel.free_params()))
    for case in cases:
        design = mean_spec.basis.design(case.times, scaled=True)
        cov = gram(kernel, case.times)
        r = case.mean - design @ beta
        k_inv_r = cov.solve(r)
        k_inv = cov.solve(np.eye(r.size))
        value += 0.5 * (cov.logdet() + float(r @ k_inv_r))
        weight = k_inv - np.outer(k_inv_r, k_inv_r)
        if case.cov is not None:
            value += 0.5 * float(np.sum(k_inv * case.cov))
            weight -= k_inv @ case.cov @ k_inv
        grad_mean -= design.T @ k_inv_r
        grad_kernel += 0.5 * np.einsum("ij,pij->p", weight, kernel.gradient(case.times, case.times))
    return value, grad_mean, grad_kernel


def _prior_objective(model, pmap, moments):
    """Negative expected log prior (without the 2 pi constant) and its gradient on the free vector."""
    pairs = defaultdict(list)
    for moment in moments:
        pairs[(moment.mean_index, moment.kernel_index)].append(moment)
    value = 0.0
    grad_means = [np.zeros(len(mean.coefficients)) for mean in model.means]
    grad_kernels = [np.zeros(len(kernel.free_params())) for kernel in model.kernels]
    for (mi, ki), cases in sorted(pairs.items()):
        v, gm, gk = _prior_terms(model.means[mi], model.kernels[ki], cases)
        value += v
        grad_means[mi] += gm
        grad_kernels[ki] += gk
    grad = np.zeros(pmap.size)
    for block in pmap.blocks:
        source = {"mean": grad_means, "kernel": grad_kernels}.get(block.kind)
        if source is not None:
            grad[block.start:block.stop] = source[block.index][block.free_positions]
    return value, grad


def _structural_slice(pmap):
    blocks = [b for b in pmap.blocks if b.kind in ("mean", "kernel")]
    return blocks[0].start, blocks[-1].stop


def _minimize_block(objective, x0, bounds, label, iteration):
    start_value, _ = objective(x0)
    if not np.isfinite(start_value) or start_value >= PENALTY:
        raise FitError(f"non-finite {label} objective at the current parameters", iteration)
    result = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds)
    if not np.all(np.isfinite(result.x)):
        raise FitError(f"{label} optimiser returned non-finite parameters", iteration)
    if not result.success:
        logger.warning("iteration %s: %s optimiser stopped early: %s", iteration, label, result.message)
    if result.fun <= start_value:
        return result.x
    return x0


def _structural_step(model, pmap, moments, iteration):
    lo, hi = _structural_slice(pmap)
    if hi == lo:
        return model
    x_full = pmap.forward(model)

    def objective(xs):
        x = x_full.copy()
        x[lo:hi] = xs
        try:
            value, grad = _prior_objective(pmap.inverse(x, model), pmap, moments)
        except LGPError:
            return PENALTY, np.zeros(hi - lo)
        if not np.isfinite(value):
            return PENALTY, np.zeros(hi - lo)
        return value, grad[lo:hi]

    x_full[lo:hi] = _minimize_block(objective, x_full[lo:hi], pmap.bounds()[lo:hi], "structural", iteration)
    return pmap.inverse(x_full, model)


# --- EM --------------------------------------------------------------------------------------

def _trace_row(iteration, model, **extra):
    row = {"iteration": iteration}
    row.update(parameter_table(model))
    row.update(extra)
    return row


def fit_em_linear(dataset: Dataset, model0: ModelSpec, opts: FitOptions = FitOptions()) -> FitResult:
    if not model0.measurement.all_linear:
        raise MeasurementError("EM with a closed-form E-step needs an all-linear measurement model")
    _check_inputs(dataset, model0)
    pmap = ParameterMap(model0)
    model = model0
    moments, loglik = _run_estep(dataset, model, opts.n_jobs)
    rows = [_trace_row(0, model, loglik=loglik)]
    converged, reason = False, "iteration budget exhausted"
    iteration = 0
    for iteration in trange(1, opts.max_iter + 1, desc="EM", disable=not opts.progress):
        updated = _measurement_step_linear(dataset, model, pmap, moments)
        updated = _structural_step(updated, pmap, moments, iteration)
        step = float(np.max(np.abs(pmap.forward(updated) - pmap.forward(model)), initial=0.0))
        new_moments, new_loglik = _run_estep(dataset, updated, opts.n_jobs)
        gain = new_loglik - loglik
        if gain < -ASCENT_TOLERANCE * max(1.0, abs(loglik)):
            logger.warning("iteration %d: log-likelihood decreased by %.3g", iteration, -gain)
        model, moments, loglik = updated, new_moments, new_loglik
        rows.append(_trace_row(iteration, model, loglik=loglik))
        logger.debug("EM iteration %d: loglik %.6f, max step %.3g", iteration, loglik, step)
        if step < opts.tol:
            converged, reason = True, f"max parameter change {step:.3g} < tol"
            break
        if gain < opts.tol:
            converged, reason = True, f"log-likelihood gain {gain:.3g} < tol"
            break
    if not converged:
        logger.warning("EM stopped after %d iterations without converging", iteration)
    logger.info("EM finished after %d iterations, loglik %.4f (%s)", iteration, loglik, reason)
    return FitResult(model, "em", loglik, pd.DataFrame(rows), converged, reason, iteration, seed=opts.seed)


# --- stochastic EM ---------------------------------------------------------------------------

def _item_pairs(dataset, thetas, j):
    ys, ts = [], []
    for series, theta in zip(dataset.individuals, thetas):
        y = series.responses[:, j]
        seen = ~np.isnan(y)
        ys.append(y[seen])
        ts.append(theta[seen])
    return np.concatenate(ys), np.concatenate(ts)


def _linear_free_gradient(item, y, theta):
    resid = y - item.a * theta - item.b
    return np.array([
        np.sum(resid * theta) / item.sigma2,
        np.sum(resid) / item.sigma2,
        np.sum(-0.5 + 0.5 * resid ** 2 / item.sigma2),
    ])


def _item_value_and_gradient(item, y, theta):
    if isinstance(item, ProbitItem):
        value = float(np.sum(item.logprob(y, theta)))
        grad = item.free_gradient(item.natural_gradient(y, theta)).sum(axis=0) if y.size else np.zeros(
            len(item.free_params()))
        return value, grad
    return float(np.sum(item.logdensity(y, theta))), _linear_free_gradient(item, y, theta)


def _draw_moments(dataset, model, thetas):
    return [
        _Moments(series.times, theta, None, *_component_indices(model, series.group))
        for series, theta in zip(dataset.individuals, thetas)
    ]


def complete_data_objective(dataset: Dataset, model: ModelSpec, thetas: Sequence[np.ndarray],
                            pmap: Optional[ParameterMap] = None, x=None):
    """
    Complete-data log-likelihood sum_i [log g(y_i | theta_i) + log N(theta_i; m, K)] and its
    gradient on the free vector of `pmap`. If `x` is given the model is pmap.inverse(x).
    """
    pmap = pmap or ParameterMap(model)
    if x is not None:
        model = pmap.inverse(x, model)
    value, grad = 0.0, np.zeros(pmap.size)
    for j, item in enumerate(model.measurement.items):
        y, theta = _item_pairs(dataset, thetas, j)
        v, g = _item_value_and_gradient(item, y, theta)
        block = pmap.block("item", j)
        value += v
        grad[block.start:block.stop] = g[block.free_positions]
    prior_value, prior_grad = _prior_objective(model, pmap, _draw_moments(dataset, model, thetas))
    n_values = sum(series.n_obs for series in dataset.individuals)
    value -= prior_value + 0.5 * n_values * LOG_2PI
    return value, grad - prior_grad


def _update_probit(item: ProbitItem, block, y, theta, iteration):
    free = block.free_positions
    if not free or y.size == 0:
        return item
    base = item.free_params()

    def objective(xs):
        full = base.copy()
        full[free] = xs
        try:
            candidate = item.with_free_params(full)
            value, grad = _item_value_and_gradient(candidate, y, theta)
        except LGPError:
            return PENALTY, np.zeros(len(free))
        if not np.isfinite(value):
            return PENALTY, np.zeros(len(free))
        return -value, -grad[free]

    full = base.copy()
    full[free] = _minimize_block(objective, base[free], [(-30.0, 30.0)] * len(free), "probit item", iteration)
    return item.with_free_params(full)


def _stem_mstep(dataset, model, pmap, thetas, iteration):
    items = list(model.measurement.items)
    for j, item in enumerate(items):
        block = pmap.block("item", j)
        y, theta = _item_pairs(dataset, thetas, j)
        if isinstance(item, ProbitItem):
            items[j] = _update_probit(item, block, y, theta, iteration)
        else:
            stats = np.array([y.size, y.sum(), y @ y, theta.sum(), theta @ theta, y @ theta])
            fixed = {k for k, _ in block.fixed}
            items[j] = _update_linear(item, stats, 0 in fixed, 1 in fixed)
    model = model.with_components(measurement=model.measurement.with_items(items))
    return _structural_step(model, pmap, _draw_moments(dataset, model, thetas), iteration)


def _average_models(models: List[ModelSpec]) -> ModelSpec:
    """Component-wise average of natural parameters."""
    last = models[-1]

    def avg(parts):
        return np.mean([np.asarray(p, dtype=float) for p in parts], axis=0)

    means = [mean.with_coefficients(tuple(avg([m.means[g].coefficients for m in models])))
             for g, mean in enumerate(last.means)]
    kernels = [kernel.with_natural(tuple(avg([m.kernels[g].natural() for m in models])))
               for g, kernel in enumerate(last.kernels)]
    items = [item.with_natural(tuple(avg([m.measurement.items[j].natural() for m in models])))
             for j, item in enumerate(last.measurement.items)]
    return last.with_components(means, kernels, last.measurement.with_items(items))


def _ste_step(k, series, model, state, sweeps, seed, iteration):
    sampler = GibbsSampler(series, model)
    state = state if state is not None else sampler.initial_state()
    return sampler.run(state, sweeps, stream(seed, k, iteration))


def fit_stem(dataset: Dataset, model0: ModelSpec, opts: FitOptions = FitOptions()) -> FitResult:
    _check_inputs(dataset, model0)
    pmap = ParameterMap(model0)
    model = model0
    states = [None] * dataset.N
    total = opts.m0 + opts.m
    history, rows = [], []
    objective = None
    for iteration in trange(1, total + 1, desc="StEM", disable=not opts.progress):
        states = Parallel(n_jobs=opts.n_jobs, prefer="threads")(
            delayed(_ste_step)(k, series, model, states[k], opts.sweeps, opts.seed, iteration)
            for k, series in enumerate(dataset.individuals)
        )
        thetas = [state.theta for state in states]
        model = _stem_mstep(dataset, model, pmap, thetas, iteration)
        objective, _ = complete_data_objective(dataset, model, thetas, pmap)
        if not np.isfinite(objective):
            raise FitError("non-finite complete-data objective", iteration)
        history.append(model)
        rows.append(_trace_row(iteration, model, objective=objective))
        logger.debug("StEM iteration %d: objective %.6f", iteration, objective)
    psi_hat = _average_models(history[-opts.m:])
    reason = f"iteration budget m0 + m = {total} completed"
    logger.info("StEM finished: %s, final objective %.4f", reason, objective)
    return FitResult(psi_hat, "stem", objective, pd.DataFrame(rows), True, reason, total,
                     m0=opts.m0, m=opts.m, seed=opts.seed, objective=objective)


# --- dispatch --------------------------------------------------------------------------------

def _dispatch(dataset, model0, opts):
    method = opts.method
    if method == "auto":
        method = "em" if model0.measurement.all_linear else "stem"
    if opts.start == "data":
        rng = stream(opts.seed, dataset.N, 0) if opts.random_init else None
        model0 = initial_model(dataset, model0, opts.random_init, rng)
    logger.info("fitting %d individuals (%d observations) by %s", dataset.N, dataset.n_observations, method)
    if method == "em":
        return fit_em_linear(dataset, model0, opts)
    return fit_stem(dataset, model0, opts)


def fit_grouped(dataset: Dataset, model: ModelSpec, opts: FitOptions = FitOptions()) -> FitResult:
    """Fit with group-specific mean and/or kernel; measurement parameters are shared across groups."""
    if not model.groups:
        raise FitError("grouped fit needs a model with declared groups")
    missing = [s.individual_id for s in dataset.individuals if s.group is None]
    if missing:
        raise FitError(f"grouped fit needs a group label for every individual; missing for {missing[:5]}")
    counts = {g: 0 for g in model.groups}
    for series in dataset.individuals:
        if series.group not in counts:
            raise FitError(f"individual {series.individual_id!r} has undeclared group {series.group!r}")
        counts[series.group] += 1
    empty = [g for g, n in counts.items() if n == 0]
    if empty:
        raise FitError(f"groups without individuals: {empty}")
    logger.debug("group sizes %s", counts)
    return _dispatch(dataset, model, opts)


def fit(dataset: Dataset, model0: ModelSpec, opts: FitOptions = FitOptions()) -> FitResult:
    """EM for all-linear models, StEM otherwise (or as forced by opts.method)."""
    if model0.groups:
        return fit_grouped(dataset, model0, opts)
    return _dispatch(dataset, model0, opts)
