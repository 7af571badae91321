"""Individual-level bootstrap: resample whole series with replacement and refit."""
import logging
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from app.core.dataset import Dataset, IndividualSeries, LGPError
from app.core.fit import FitOptions, fit
from app.core.model import ModelSpec
from app.utils import DEFAULT_SEED, stream

logger = logging.getLogger(__name__)

MAX_FAILURE_SHARE = 0.10
FITTERS = {"auto": "auto", "linear": "em", "em": "em", "stem": "stem"}


class BootstrapError(LGPError):
    pass


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    """Replicate estimates (one row per successful refit) and percentile intervals."""
    replicates: pd.DataFrame
    ci: pd.DataFrame
    B: int
    n_failed: int
    failures: Tuple[str, ...] = ()


def _resample(dataset: Dataset, positions) -> Dataset:
    """Dataset built from the given positions; repeated individuals get distinct ids."""
    individuals = []
    for k, position in enumerate(positions):
        series = dataset.individuals[int(position)]
        individuals.append(IndividualSeries(f"{series.individual_id}~{k}", series.times, series.responses,
                                            series.covariates))
    return dataset.with_individuals(individuals)


def _draw_positions(rng, n):
    return rng.integers(0, n, size=n)


def _replicate(b, dataset, template, opts, seed, resampler):
    positions = resampler(stream(seed, b), dataset.N)
    try:
        result = fit(_resample(dataset, positions), template, opts)
    except LGPError as e:
        logger.warning("bootstrap replicate %d failed: %s", b, e)
        return b, None, str(e)
    return b, result.estimates, None


def percentile_ci(frame: pd.DataFrame, level=0.95) -> pd.DataFrame:
    tail = 50.0 * (1.0 - level)
    lower = np.nanpercentile(frame.to_numpy(dtype=float), tail, axis=0)
    upper = np.nanpercentile(frame.to_numpy(dtype=float), 100.0 - tail, axis=0)
    return pd.DataFrame({"parameter": frame.columns, "lower": lower, "upper": upper})


def bootstrap(dataset: Dataset, model_template: ModelSpec, B: int, fitter="auto", seed=DEFAULT_SEED,
              opts: Optional[FitOptions] = None, contrasts: Optional[Dict[str, Tuple[str, str]]] = None,
              resampler: Optional[Callable] = None, n_jobs=1, level=0.95, progress=False) -> BootstrapResult:
    """
    B resampled refits from the template start. `contrasts` maps a label to (name_a, name_b) and
    adds the replicate differences name_a - name_b. Fails if more than 10% of refits fail.
    """
    if B < 1:
        raise BootstrapError(f"need at least one replicate, got {B}")
    if fitter not in FITTERS:
        raise BootstrapError(f"unknown fitter {fitter!r}; choose from {sorted(FITTERS)}")
    opts = replace(opts or FitOptions(), method=FITTERS[fitter], n_jobs=1, progress=False)
    resampler = resampler or _draw_positions

    outcomes = Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(_replicate)(b, dataset, model_template, opts, seed, resampler)
        for b in tqdm(range(B), desc="bootstrap", disable=not progress)
    )
    rows: List[dict] = []
    failures = []
    for b, estimates, error in outcomes:
        if error is not None:
            failures.append(f"replicate {b}: {error}")
            continue
        rows.append({"replicate": b, **estimates})
    if len(failures) > MAX_FAILURE_SHARE * B:
        raise BootstrapError(f"{len(failures)} of {B} bootstrap refits failed; first: {failures[0]}")
    if not rows:
        raise BootstrapError("no bootstrap replicate succeeded")

    replicates = pd.DataFrame(rows).set_index("replicate")
    for label, (name_a, name_b) in (contrasts or {}).items():
        missing = [n for n in (name_a, name_b) if n not in replicates.columns]
        if missing:
            raise BootstrapError(f"contrast {label!r} refers to unknown parameters {missing}")
        replicates[label] = replicates[name_a] - replicates[name_b]
    logger.info("bootstrap: %d of %d replicates succeeded", len(rows), B)
    return BootstrapResult(replicates, percentile_ci(replicates, level), B, len(failures), tuple(failures))
