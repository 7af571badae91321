"""Datasets of irregularly sampled multivariate longitudinal observations."""
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np


class LGPError(Exception):
    """Base class for all errors raised by the package."""


class DataFormatError(LGPError, ValueError):
    pass


class DomainError(LGPError, ValueError):
    pass


class NumericalError(LGPError):
    pass


class SpecError(LGPError, ValueError):
    """Invalid model component (kernel, basis, item) definition."""


@dataclass(frozen=True)
class ItemType:
    """Declared type of one indicator: continuous, or ordinal with levels 0..n_levels."""
    kind: str
    n_levels: int = 0

    CONTINUOUS = "continuous"
    ORDINAL = "ordinal"

    def __post_init__(self):
        if self.kind not in (self.CONTINUOUS, self.ORDINAL):
            raise DataFormatError(f"unknown item kind {self.kind!r}")
        if self.kind == self.ORDINAL and self.n_levels < 1:
            raise DataFormatError("ordinal items need at least two categories")

    @classmethod
    def continuous(cls):
        return cls(cls.CONTINUOUS)

    @classmethod
    def ordinal(cls, n_levels):
        return cls(cls.ORDINAL, int(n_levels))

    @property
    def is_ordinal(self):
        return self.kind == self.ORDINAL


@dataclass(frozen=True)
class ObservationRecord:
    """One measurement occasion; NaN entries in `values` are missing responses."""
    individual_id: str
    time: float
    values: Tuple[float, ...]
    group: Optional[str] = None


@dataclass(frozen=True)
class CovariateProfile:
    group: Optional[str] = None
    extras: Dict[str, float] = field(default_factory=dict)


@dataclass(frozen=True, eq=False)
class IndividualSeries:
    """Observation times (strictly increasing) and an S x J response array."""
    individual_id: str
    times: np.ndarray
    responses: np.ndarray
    covariates: CovariateProfile = field(default_factory=CovariateProfile)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        responses = np.asarray(self.responses, dtype=float)
        if responses.ndim == 1:
            responses = responses.reshape(-1, 1)
        if times.size < 1:
            raise DataFormatError(f"individual {self.individual_id!r} has no observations")
        if responses.shape[0] != times.size:
            raise DataFormatError(
                f"individual {self.individual_id!r}: {times.size} times but {responses.shape[0]} response rows"
            )
        if not np.all(np.isfinite(times)):
            raise DataFormatError(f"individual {self.individual_id!r} has non-finite times")
        if np.any(np.diff(times) <= 0):
            raise DataFormatError(f"individual {self.individual_id!r}: times must be strictly increasing")
        times.setflags(write=False)
        responses.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "responses", responses)

    @property
    def n_obs(self):
        return self.times.size

    @property
    def group(self):
        return self.covariates.group

    def records(self) -> Iterator[ObservationRecord]:
        for t, row in zip(self.times, self.responses):
            yield ObservationRecord(self.individual_id, float(t), tuple(float(v) for v in row), self.group)


@dataclass(frozen=True, eq=False)
class Dataset:
    individuals: Tuple[IndividualSeries, ...]
    item_types: Tuple[ItemType, ...]
    time_horizon: float
    groups: Tuple[str, ...] = ()

    def __post_init__(self):
        individuals = tuple(self.individuals)
        item_types = tuple(self.item_types)
        object.__setattr__(self, "individuals", individuals)
        object.__setattr__(self, "item_types", item_types)
        object.__setattr__(self, "groups", tuple(str(g) for g in self.groups))
        if not individuals:
            raise DataFormatError("dataset has no individuals")
        if not item_types:
            raise DataFormatError("dataset declares no indicators")
        seen = set()
        for series in individuals:
            if series.individual_id in seen:
                raise DataFormatError(f"duplicate individual id {series.individual_id!r}")
            seen.add(series.individual_id)
            self._check_series(series)

    def _check_series(self, series):
        if series.responses.shape[1] != self.J:
            raise DataFormatError(
                f"individual {series.individual_id!r} has {series.responses.shape[1]} indicators, expected {self.J}"
            )
        if series.times[0] < 0 or series.times[-1] > self.time_horizon:
            raise DataFormatError(
                f"individual {series.individual_id!r} has times outside [0, {self.time_horizon}]"
            )
        if self.groups and series.group is not None and series.group not in self.groups:
            raise DataFormatError(f"individual {series.individual_id!r}: unknown group {series.group!r}")
        for j, item in enumerate(self.item_types):
            column = series.responses[:, j]
            observed = column[~np.isnan(column)]
            if item.is_ordinal and observed.size:
                bad = (observed != np.round(observed)) | (observed < 0) | (observed > item.n_levels)
                if np.any(bad):
                    raise DataFormatError(
                        f"individual {series.individual_id!r}: item {j + 1} level outside 0..{item.n_levels}"
                    )

    @property
    def N(self):
        return len(self.individuals)

    @property
    def J(self):
        return len(self.item_types)

    @property
    def n_observations(self):
        return sum(series.n_obs for series in self.individuals)

    @property
    def ids(self) -> List[str]:
        return [series.individual_id for series in self.individuals]

    def has_groups(self):
        return all(series.group is not None for series in self.individuals)

    def by_id(self, individual_id):
        for series in self.individuals:
            if series.individual_id == individual_id:
                return series
        raise KeyError(individual_id)

    def records(self) -> Iterator[ObservationRecord]:
        for series in self.individuals:
            yield from series.records()

    def with_individuals(self, individuals: Sequence[IndividualSeries]):
        return Dataset(tuple(individuals), self.item_types, self.time_horizon, self.groups)

    def pooled_times(self):
        return np.concatenate([series.times for series in self.individuals])

    def equals(self, other, rtol=1e-12):
        """Structural equality up to floating-point formatting."""
        if not isinstance(other, Dataset):
            return False
        if (self.item_types, self.groups, self.ids) != (other.item_types, other.groups, other.ids):
            return False
        if not np.isclose(self.time_horizon, other.time_horizon, rtol=rtol):
            return False
        for a, b in zip(self.individuals, other.individuals):
            if a.group != b.group or a.times.shape != b.times.shape:
                return False
            if not np.allclose(a.times, b.times, rtol=rtol, atol=0):
                return False
            if not np.allclose(a.responses, b.responses, rtol=rtol, atol=0, equal_nan=True):
                return False
        return True
