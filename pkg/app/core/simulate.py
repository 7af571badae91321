"""
Simulation of EMA-style studies and the scores used to evaluate a fit.

Each individual is measured on `days` consecutive days at `per_day` uniformly drawn times per
day. The latent curve is drawn jointly at the observation times and on a dense scoring grid,
so the truth on the grid and the simulated responses come from the same path.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.integrate import trapezoid

from app.core.dataset import CovariateProfile, Dataset, DomainError, IndividualSeries, ItemType, SpecError
from app.core.gaussian import GaussianSurrogate, mvn_sample
from app.core.measurement import ProbitItem
from app.core.model import ModelSpec, fixed_parameter_names, parameter_table
from app.core.posterior import DEFAULT_GRID_POINTS, PosteriorCurve, default_grid
from app.utils import DEFAULT_SEED, stream

logger = logging.getLogger(__name__)

FIXED_MARK = "·"


@dataclass(frozen=True)
class SimConfig:
    N: int
    days: int
    per_day: Union[int, Tuple[int, int]]
    model: ModelSpec
    seed: int = DEFAULT_SEED
    group_mix: Optional[Dict[str, float]] = None
    grid_points: int = DEFAULT_GRID_POINTS

    def __post_init__(self):
        if self.N < 1 or self.days < 1:
            raise SpecError("simulation needs N >= 1 and days >= 1")
        low, high = self.per_day_range
        if low < 1 or high < low:
            raise SpecError(f"per_day must be >= 1 (or a range low <= high), got {self.per_day}")
        if self.group_mix:
            if set(self.group_mix) - set(self.model.groups):
                raise SpecError(f"group_mix labels {sorted(self.group_mix)} not among model groups {self.model.groups}")
            if any(p < 0 for p in self.group_mix.values()) or sum(self.group_mix.values()) <= 0:
                raise SpecError("group_mix proportions must be non-negative with a positive sum")

    @property
    def per_day_range(self):
        if isinstance(self.per_day, (tuple, list)):
            return int(self.per_day[0]), int(self.per_day[1])
        return int(self.per_day), int(self.per_day)

    @property
    def horizon(self):
        return float(self.days)


@dataclass(frozen=True, eq=False)
class SimulationTruth:
    """Latent values kept for scoring: at the observation times and on the scoring grid."""
    model: ModelSpec
    grid: np.ndarray
    theta_grid: np.ndarray
    theta_obs: Tuple[np.ndarray, ...]

    def grid_frame(self, ids: Sequence[str]) -> pd.DataFrame:
        frames = [pd.DataFrame({"id": individual_id, "t": self.grid, "theta": row})
                  for individual_id, row in zip(ids, self.theta_grid)]
        return pd.concat(frames, ignore_index=True)


def sample_schedule(config: SimConfig, individual_index, rng) -> np.ndarray:
    """Signal-contingent schedule: per_day uniform times in every day [d, d + 1), sorted."""
    low, high = config.per_day_range
    times = []
    for day in range(config.days):
        count = low if low == high else int(rng.integers(low, high + 1))
        times.append(np.sort(day + rng.uniform(size=count)))
    times = np.concatenate(times)
    logger.debug("individual %d: %d measurement times", individual_index, times.size)
    return times


def item_types_for(model: ModelSpec):
    return tuple(
        ItemType.ordinal(item.n_levels) if isinstance(item, ProbitItem) else ItemType.continuous()
        for item in model.measurement.items
    )


def _assign_group(config, rng):
    if not config.group_mix:
        return None
    labels = [g for g in config.model.groups if g in config.group_mix]
    weights = np.array([config.group_mix[g] for g in labels], dtype=float)
    return labels[int(rng.choice(len(labels), p=weights / weights.sum()))]


def _simulate_one(config, index, grid):
    rng = stream(config.seed, index)
    model = config.model
    group = _assign_group(config, rng)
    times = sample_schedule(config, index, rng)
    joint = np.concatenate([times, grid])
    surrogate = GaussianSurrogate.from_model(model.mean_for(group), model.kernel_for(group), joint)
    theta = mvn_sample(surrogate, rng)
    theta_obs, theta_grid = theta[:times.size], theta[times.size:]
    responses = np.column_stack([item.sample(theta_obs, rng) for item in model.measurement.items])
    series = IndividualSeries(str(index + 1), times, responses, CovariateProfile(group=group))
    return series, theta_obs, theta_grid


def simulate_dataset(config: SimConfig, n_jobs=1) -> Tuple[Dataset, SimulationTruth]:
    grid = default_grid(config.horizon, config.grid_points)
    out = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_simulate_one)(config, i, grid) for i in range(config.N)
    )
    groups = tuple(config.model.groups) if config.group_mix else ()
    dataset = Dataset(tuple(s for s, _, _ in out), item_types_for(config.model), config.horizon, groups)
    truth = SimulationTruth(config.model, grid, np.vstack([g for _, _, g in out]), tuple(o for _, o, _ in out))
    logger.info("simulated %d individuals, %d observations", dataset.N, dataset.n_observations)
    return dataset, truth


def _estimates(fit):
    return parameter_table(fit.psi_hat if hasattr(fit, "psi_hat") else fit)


def mse_report(truths: ModelSpec, fits: Sequence) -> pd.DataFrame:
    """Per-parameter mean estimate, bias and MSE over replications; constrained entries marked '·'."""
    if not fits:
        raise SpecError("mse_report needs at least one fit")
    truth = parameter_table(truths)
    fixed = set(fixed_parameter_names(truths))
    estimates = pd.DataFrame([_estimates(f) for f in fits])
    rows = []
    for name, value in truth.items():
        if name in fixed:
            rows.append({"parameter": name, "truth": value, "mean": FIXED_MARK, "bias": FIXED_MARK,
                         "mse": FIXED_MARK})
            continue
        column = estimates[name].to_numpy(dtype=float)
        rows.append({
            "parameter": name,
            "truth": value,
            "mean": float(column.mean()),
            "bias": float(column.mean() - value),
            "mse": float(np.mean((column - value) ** 2)),
        })
    return pd.DataFrame(rows)


@dataclass(frozen=True, eq=False)
class CurveRecoveryReport:
    """d_i: L2 error of the EAP curve; e_i: L2 error of the fitted population mean."""
    frame: pd.DataFrame

    def summary(self) -> Dict[str, float]:
        ratio = self.frame["ratio"].dropna()
        return {
            "n": int(len(self.frame)),
            "ratio_median": float(ratio.median()),
            "ratio_q05": float(ratio.quantile(0.05)),
            "ratio_q95": float(ratio.quantile(0.95)),
            "share_below_1": float((ratio < 1.0).mean()),
        }


def curve_recovery(truth_theta, curves: List[PosteriorCurve], alpha_hat, grid=None,
                   ids: Optional[Sequence[str]] = None) -> CurveRecoveryReport:
    """
    `truth_theta` is (N, G) on the shared grid; `alpha_hat` is the fitted population mean, given as
    a constant, a (G,) curve, or one (G,) curve per individual.
    """
    truth_theta = np.atleast_2d(np.asarray(truth_theta, dtype=float))
    if len(curves) != truth_theta.shape[0]:
        raise DomainError(f"{len(curves)} curves for {truth_theta.shape[0]} true paths")
    grid = np.asarray(curves[0].grid if grid is None else grid, dtype=float)
    if truth_theta.shape[1] != grid.size:
        raise DomainError("true paths and scoring grid have different lengths")
    for curve in curves:
        if curve.grid.shape != grid.shape or not np.allclose(curve.grid, grid, rtol=0, atol=1e-12):
            raise DomainError("posterior curve grid differs from the scoring grid")
    baseline = np.broadcast_to(np.asarray(alpha_hat, dtype=float), truth_theta.shape)
    estimated = np.vstack([curve.mean for curve in curves])
    d = np.sqrt(trapezoid((truth_theta - estimated) ** 2, grid, axis=1))
    e = np.sqrt(trapezoid((truth_theta - baseline) ** 2, grid, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(e > 0, d / np.where(e > 0, e, 1.0), np.nan)
    ids = list(ids) if ids is not None else [str(k + 1) for k in range(len(curves))]
    return CurveRecoveryReport(pd.DataFrame({"id": ids, "d": d, "e": e, "ratio": ratio}))
