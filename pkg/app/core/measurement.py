"""
Measurement models g_j(y | theta) under local independence.

Continuous items follow a linear factor model y = a theta + b + e, e ~ N(0, sigma2).
Ordinal items follow the probit model

    P(Y = l | theta) = Phi(b_{l+1} + a theta) - Phi(b_l + a theta),    b_0 = -inf, b_{n+1} = +inf,

equivalently Y = l when b_l <= Y* < b_{l+1} with Y* = -a theta + eps. With a > 0 a higher theta
therefore moves mass towards LOWER levels; sampler and mass function share this convention.
"""
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np
from scipy.special import log_ndtr

from app.core.dataset import DataFormatError, ItemType, LGPError, SpecError

LOG_SQRT_2PI = 0.5 * float(np.log(2.0 * np.pi))


class MeasurementError(LGPError, ValueError):
    pass


def _log_phi(x):
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = -0.5 * x * x - LOG_SQRT_2PI
    return np.where(np.isfinite(x), out, -np.inf)


def probit_logprob(lo, hi) -> np.ndarray:
    """log(Phi(hi) - Phi(lo)) without cancellation in either tail."""
    lo, hi = np.broadcast_arrays(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
    upper_side = lo > 0
    big = np.where(upper_side, log_ndtr(-lo), log_ndtr(hi))
    small = np.where(upper_side, log_ndtr(-hi), log_ndtr(lo))
    with np.errstate(divide="ignore"):
        return big + np.log1p(-np.exp(small - big))


@dataclass(frozen=True)
class LinearFactorItem:
    a: float
    b: float
    sigma2: float

    kind = ItemType.CONTINUOUS

    def __post_init__(self):
        for name in ("a", "b", "sigma2"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.sigma2 > 0:
            raise SpecError(f"linear item needs sigma2 > 0, got {self.sigma2}")

    def names(self, j) -> Tuple[str, ...]:
        return (f"a{j}", f"b{j}", f"sigma2_{j}")

    def natural(self):
        return (self.a, self.b, self.sigma2)

    def with_natural(self, values):
        return LinearFactorItem(*values)

    def free_params(self):
        return np.array([self.a, self.b, np.log(self.sigma2)])

    def with_free_params(self, x):
        return LinearFactorItem(x[0], x[1], float(np.exp(x[2])))

    def matches(self, item_type: ItemType):
        return not item_type.is_ordinal

    def logdensity(self, y, theta) -> np.ndarray:
        resid = np.asarray(y, dtype=float) - self.a * np.asarray(theta, dtype=float) - self.b
        return -0.5 * (np.log(2.0 * np.pi * self.sigma2) + resid ** 2 / self.sigma2)

    def sample(self, theta, rng):
        theta = np.asarray(theta, dtype=float)
        return self.a * theta + self.b + np.sqrt(self.sigma2) * rng.standard_normal(theta.shape)


@dataclass(frozen=True)
class ProbitItem:
    a: float
    thresholds: Tuple[float, ...]

    kind = ItemType.ORDINAL

    def __post_init__(self):
        object.__setattr__(self, "a", float(self.a))
        thresholds = tuple(float(b) for b in np.atleast_1d(self.thresholds))
        object.__setattr__(self, "thresholds", thresholds)
        if not thresholds:
            raise SpecError("probit item needs at least one threshold")
        if not all(np.isfinite(thresholds)) or any(hi <= lo for lo, hi in zip(thresholds, thresholds[1:])):
            raise SpecError(f"probit thresholds must be finite and strictly increasing: {thresholds}")

    @property
    def n_levels(self):
        """Highest observable level; levels run 0..n_levels."""
        return len(self.thresholds)

    def names(self, j):
        return (f"a{j}", *(f"b{j}_{l + 1}" for l in range(self.n_levels)))

    def natural(self):
        return (self.a, *self.thresholds)

    def with_natural(self, values):
        return ProbitItem(values[0], tuple(values[1:]))

    def free_params(self):
        b = np.asarray(self.thresholds)
        return np.concatenate([[self.a, b[0]], np.log(np.diff(b))])

    def with_free_params(self, x):
        x = np.asarray(x, dtype=float)
        thresholds = x[1] + np.concatenate([[0.0], np.cumsum(np.exp(x[2:]))])
        return ProbitItem(x[0], tuple(thresholds))

    def matches(self, item_type: ItemType):
        return item_type.is_ordinal and item_type.n_levels == self.n_levels

    def _edges(self):
        return np.concatenate([[-np.inf], self.thresholds, [np.inf]])

    def _levels(self, y):
        y = np.asarray(y, dtype=float)
        levels = np.round(y)
        if np.any((levels != y) | (levels < 0) | (levels > self.n_levels)):
            raise MeasurementError(f"ordinal level outside 0..{self.n_levels}: {y}")
        return levels.astype(int)

    def interval(self, level):
        levels = self._levels(level)
        edges = self._edges()
        return edges[levels], edges[levels + 1]

    def logprob(self, y, theta) -> np.ndarray:
        lo, hi = self.interval(y)
        shift = self.a * np.asarray(theta, dtype=float)
        return probit_logprob(lo + shift, hi + shift)

    def probabilities(self, theta) -> np.ndarray:
        """(..., n_levels + 1) category probabilities."""
        theta = np.asarray(theta, dtype=float)[..., None]
        levels = np.arange(self.n_levels + 1)
        return np.exp(self.logprob(levels, theta))

    def natural_gradient(self, y, theta) -> np.ndarray:
        """d log P(Y = y | theta) / d (a, b_1..b_n), shape (n_obs, 1 + n_levels)."""
        y = np.atleast_1d(y)
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        levels = self._levels(y)
        lo, hi = self.interval(levels)
        lo, hi = lo + self.a * theta, hi + self.a * theta
        logp = probit_logprob(lo, hi)
        up = np.exp(_log_phi(hi) - logp)
        down = np.exp(_log_phi(lo) - logp)
        grad = np.zeros((levels.size, 1 + self.n_levels))
        grad[:, 0] = theta * (up - down)
        rows = np.arange(levels.size)
        has_lower = levels > 0
        grad[rows[has_lower], levels[has_lower]] -= down[has_lower]
        has_upper = levels < self.n_levels
        grad[rows[has_upper], levels[has_upper] + 1] += up[has_upper]
        return grad

    def free_gradient(self, natural_grad) -> np.ndarray:
        """Chain rule from (a, b_1..b_n) to (a, b_1, log gaps)."""
        natural_grad = np.atleast_2d(natural_grad)
        gaps = np.diff(self.thresholds)
        tails = np.cumsum(natural_grad[:, :0:-1], axis=1)[:, ::-1]
        out = np.empty_like(natural_grad)
        out[:, 0] = natural_grad[:, 0]
        out[:, 1] = tails[:, 0]
        out[:, 2:] = tails[:, 1:] * gaps
        return out

    def sample(self, theta, rng):
        theta = np.asarray(theta, dtype=float)
        latent = -self.a * theta + rng.standard_normal(theta.shape)
        return np.searchsorted(self.thresholds, latent, side="right").astype(float)


Item = Union[LinearFactorItem, ProbitItem]


@dataclass(frozen=True)
class MeasurementSpec:
    items: Tuple[Item, ...]

    def __post_init__(self):
        items = tuple(self.items)
        object.__setattr__(self, "items", items)
        if not items:
            raise SpecError("measurement model needs at least one item")

    @property
    def J(self):
        return len(self.items)

    @property
    def all_linear(self):
        return all(isinstance(item, LinearFactorItem) for item in self.items)

    @property
    def has_ordinal(self):
        return any(isinstance(item, ProbitItem) for item in self.items)

    def ordinal_indices(self):
        return [j for j, item in enumerate(self.items) if isinstance(item, ProbitItem)]

    def linear_indices(self):
        return [j for j, item in enumerate(self.items) if isinstance(item, LinearFactorItem)]

    def names(self):
        return tuple(name for j, item in enumerate(self.items, start=1) for name in item.names(j))

    def natural(self):
        return tuple(value for item in self.items for value in item.natural())

    def with_items(self, items):
        return MeasurementSpec(tuple(items))

    def check(self, item_types):
        """Raise MeasurementError unless every item matches the declared dataset item type."""
        if len(item_types) != self.J:
            raise MeasurementError(f"dataset has {len(item_types)} items, measurement model has {self.J}")
        for j, (item, item_type) in enumerate(zip(self.items, item_types), start=1):
            if not item.matches(item_type):
                raise MeasurementError(
                    f"item {j}: {type(item).__name__} does not fit a {item_type.kind} item "
                    f"with {item_type.n_levels} levels"
                )


def item_logdensity(item: Item, y, theta) -> float:
    """Integer-typed y is an ordinal level; a real y is a continuous response."""
    if y is None:
        return 0.0
    integer_typed = isinstance(y, (int, np.integer))
    if not integer_typed and np.isnan(y):
        return 0.0
    if isinstance(item, ProbitItem):
        if float(y) != round(float(y)):
            raise DataFormatError(f"ordinal item given the continuous response {y!r}")
        return float(item.logprob(y, theta))
    if integer_typed:
        raise DataFormatError(f"continuous item given the ordinal level {y!r}")
    return float(item.logdensity(y, theta))


def item_sample(item: Item, theta, rng) -> float:
    return float(item.sample(np.asarray([theta], dtype=float), rng)[0])


def latent_response_interval(item: ProbitItem, level) -> Tuple[float, float]:
    if not isinstance(item, ProbitItem):
        raise MeasurementError("latent responses only exist for ordinal items")
    lo, hi = item.interval(level)
    return float(lo), float(hi)


def response_logdensity(spec: MeasurementSpec, values, theta) -> float:
    """Joint log-density of one occasion's response vector; missing entries contribute 0."""
    values = np.asarray(values, dtype=float)
    if values.size != spec.J:
        raise MeasurementError(f"response vector has {values.size} entries, expected {spec.J}")
    return float(sum(item_logdensity(item, y, theta) for item, y in zip(spec.items, values)))
