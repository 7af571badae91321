"""
Mean functions m(t) = alpha_0 + sum_d alpha_d b_d(t) over pre-specified bases on [0, T].

Bases are evaluated internally on u = t / T; `column_scales` maps the rescaled columns
back to user time so coefficients are always reported in user units.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from app.core.dataset import DomainError, SpecError

DOMAIN_SLACK = 1e-9


def _check_domain(t, horizon):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    slack = DOMAIN_SLACK * max(1.0, horizon)
    if np.any(t < -slack) or np.any(t > horizon + slack) or not np.all(np.isfinite(t)):
        bad = t[(t < -slack) | (t > horizon + slack) | ~np.isfinite(t)]
        raise DomainError(f"time {bad[0]!r} outside [0, {horizon}]")
    return t


@dataclass(frozen=True)
class BasisSet:
    horizon: float

    def __post_init__(self):
        if not self.horizon > 0:
            raise SpecError(f"basis horizon must be positive, got {self.horizon}")

    @property
    def dim(self) -> int:
        raise NotImplementedError

    def column_scales(self) -> np.ndarray:
        raise NotImplementedError

    def _scaled(self, u) -> np.ndarray:
        raise NotImplementedError

    def scaled(self, t) -> np.ndarray:
        """(n, dim) basis matrix on rescaled time."""
        t = _check_domain(t, self.horizon)
        return self._scaled(t / self.horizon)

    def evaluate(self, t) -> np.ndarray:
        """(n, dim) basis matrix in user time units."""
        return self.scaled(t) * self.column_scales()

    def design(self, t, scaled=True) -> np.ndarray:
        """Basis matrix with a leading intercept column."""
        columns = self.scaled(t) if scaled else self.evaluate(t)
        return np.hstack([np.ones((columns.shape[0], 1)), columns])


@dataclass(frozen=True)
class ConstantBasis(BasisSet):
    @property
    def dim(self):
        return 0

    def column_scales(self):
        return np.ones(0)

    def _scaled(self, u):
        return np.zeros((u.size, 0))


@dataclass(frozen=True)
class PolynomialBasis(BasisSet):
    degree: int = 1

    def __post_init__(self):
        super().__post_init__()
        if self.degree < 1:
            raise SpecError("polynomial degree must be >= 1")

    @property
    def dim(self):
        return self.degree

    def column_scales(self):
        return self.horizon ** np.arange(1, self.degree + 1, dtype=float)

    def _scaled(self, u):
        return u[:, None] ** np.arange(1, self.degree + 1)


@dataclass(frozen=True)
class CubicSplineBasis(BasisSet):
    """Truncated-power cubic spline: (t, t^2, t^3, (t - xi_1)^3_+, ...)."""
    knots: Tuple[float, ...] = ()

    def __post_init__(self):
        super().__post_init__()
        knots = tuple(float(k) for k in self.knots)
        object.__setattr__(self, "knots", knots)
        if not knots:
            raise SpecError("cubic spline needs at least one knot")
        if any(b <= a for a, b in zip(knots, knots[1:])):
            raise SpecError(f"spline knots must be strictly increasing: {knots}")
        if knots[0] <= 0 or knots[-1] >= self.horizon:
            raise SpecError(f"spline knots must be interior to (0, {self.horizon})")

    @property
    def dim(self):
        return 3 + len(self.knots)

    def column_scales(self):
        return self.horizon ** np.array([1.0, 2.0, 3.0] + [3.0] * len(self.knots))

    def _scaled(self, u):
        xi = np.asarray(self.knots) / self.horizon
        powers = u[:, None] ** np.arange(1, 4)
        truncated = np.clip(u[:, None] - xi[None, :], 0.0, None) ** 3
        return np.hstack([powers, truncated])


def quantile_knots(times, n_knots, horizon):
    """Equally spaced quantiles of pooled observation times, kept interior to (0, T)."""
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    knots = np.unique(np.quantile(np.asarray(times, dtype=float), probs))
    knots = knots[(knots > 0) & (knots < horizon)]
    if knots.size != n_knots:
        raise SpecError(f"could not place {n_knots} distinct interior knots")
    return tuple(float(k) for k in knots)


def basis_eval(basis: BasisSet, t) -> np.ndarray:
    """Basis values (b_1(t), ..., b_D(t)) at a single time."""
    return basis.evaluate(t)[0]


@dataclass(frozen=True)
class MeanSpec:
    basis: BasisSet
    coefficients: Tuple[float, ...]

    def __post_init__(self):
        coefficients = tuple(float(c) for c in np.atleast_1d(self.coefficients))
        object.__setattr__(self, "coefficients", coefficients)
        if len(coefficients) != self.basis.dim + 1:
            raise SpecError(
                f"mean needs {self.basis.dim + 1} coefficients (intercept + basis), got {len(coefficients)}"
            )

    @property
    def names(self):
        return tuple(f"alpha{d}" for d in range(len(self.coefficients)))

    def design_scales(self):
        return np.concatenate([[1.0], self.basis.column_scales()])

    def scaled_coefficients(self) -> np.ndarray:
        return np.asarray(self.coefficients) * self.design_scales()

    def with_scaled_coefficients(self, scaled):
        return MeanSpec(self.basis, tuple(np.asarray(scaled, dtype=float) / self.design_scales()))

    def with_coefficients(self, coefficients):
        return MeanSpec(self.basis, tuple(coefficients))

    def evaluate(self, t) -> np.ndarray:
        return self.basis.design(t, scaled=True) @ self.scaled_coefficients()


def mean_eval(spec: MeanSpec, t) -> float:
    return float(spec.evaluate(t)[0])
