"""
Covariance kernels K(t, t') for the latent Gaussian process.

Free-parameter layout (used by the optimiser, kernel-agnostic):
    SquaredExponential  (log c, log kappa)
    Exponential         (log c, log kappa)
    Periodic            (log c, log kappa, log period)
    BasisLowRank        (omega_1, ..., omega_H)

The exponential kernel is c^2 exp(-|t - t'| / (2 kappa^2)); the usual form divides the
lag by kappa, this one follows the squared denominator of the SE kernel.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg

from app.core.dataset import LGPError, NumericalError, SpecError
from app.core.mean_basis import BasisSet

logger = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class IllConditionedKernelError(LGPError):
    pass


def _closest_pair(points):
    points = np.asarray(points, dtype=float)
    if points.size < 2:
        return None
    order = np.argsort(points)
    gaps = np.diff(points[order])
    k = int(np.argmin(gaps))
    return float(points[order[k]]), float(points[order[k + 1]])


def jittered_cholesky(matrix, scale=1.0, points=None):
    """
    Lower Cholesky factor of `matrix`, adding diagonal jitter 0, 1e-10*scale, ... 1e-4*scale
    until the factorisation succeeds. Returns (factor, jitter).
    """
    matrix = np.asarray(matrix, dtype=float)
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("covariance matrix has non-finite entries")
    scale = float(scale) if scale > 0 else 1.0
    jitter = 0.0
    while True:
        try:
            shifted = matrix if jitter == 0.0 else matrix + jitter * np.eye(matrix.shape[0])
            factor = linalg.cholesky(shifted, lower=True, check_finite=False)
            if jitter > 0:
                logger.debug("cholesky needed jitter %.3g", jitter)
            return factor, jitter
        except linalg.LinAlgError:
            jitter = JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > JITTER_MAX * scale * (1 + 1e-9):
                break
    pair = _closest_pair(points) if points is not None else None
    where = f"; closest time points {pair[0]!r} and {pair[1]!r}" if pair else ""
    raise IllConditionedKernelError(f"covariance not factorisable at jitter {JITTER_MAX:g}*scale{where}")


def _lags(t, t2):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    t2 = np.atleast_1d(np.asarray(t2, dtype=float))
    return t[:, None] - t2[None, :]


@dataclass(frozen=True)
class KernelSpec:
    stationary = True

    @property
    def names(self) -> Tuple[str, ...]:
        raise NotImplementedError

    def __call__(self, t, t2) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, t, t2) -> np.ndarray:
        """Partials of K with respect to the free parameters, shape (P, len(t), len(t2))."""
        raise NotImplementedError

    def natural(self) -> Tuple[float, ...]:
        raise NotImplementedError

    def with_natural(self, values):
        raise NotImplementedError

    def free_params(self) -> np.ndarray:
        raise NotImplementedError

    def with_free_params(self, x):
        raise NotImplementedError

    def variance_scale(self) -> float:
        """Size of K(t, t), used to scale the jitter ladder."""
        raise NotImplementedError

    def diagonal(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.full(t.size, self.variance_scale())


@dataclass(frozen=True)
class _StationaryKernel(KernelSpec):
    c: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not (self.c > 0 and self.kappa > 0):
            raise SpecError(f"{type(self).__name__}: c and kappa must be positive (c={self.c}, kappa={self.kappa})")

    @property
    def names(self):
        return ("c", "kappa")

    def _correlation(self, lag):
        raise NotImplementedError

    def _log_partials(self, lag, value):
        """d K / d log(shape parameters), excluding c."""
        raise NotImplementedError

    def __call__(self, t, t2):
        return self.c ** 2 * self._correlation(_lags(t, t2))

    def gradient(self, t, t2):
        lag = _lags(t, t2)
        value = self.c ** 2 * self._correlation(lag)
        return np.stack([2.0 * value, *self._log_partials(lag, value)])

    def natural(self):
        return (self.c, self.kappa)

    def with_natural(self, values):
        return type(self)(*values)

    def free_params(self):
        return np.log(np.asarray(self.natural(), dtype=float))

    def with_free_params(self, x):
        return self.with_natural(np.exp(np.asarray(x, dtype=float)))

    def variance_scale(self):
        return self.c ** 2


@dataclass(frozen=True)
class SquaredExponential(_StationaryKernel):
    def _correlation(self, lag):
        return np.exp(-lag ** 2 / (2.0 * self.kappa ** 2))

    def _log_partials(self, lag, value):
        return [value * lag ** 2 / self.kappa ** 2]


@dataclass(frozen=True)
class Exponential(_StationaryKernel):
    def _correlation(self, lag):
        return np.exp(-np.abs(lag) / (2.0 * self.kappa ** 2))

    def _log_partials(self, lag, value):
        return [value * np.abs(lag) / self.kappa ** 2]


@dataclass(frozen=True)
class Periodic(_StationaryKernel):
    period: float = 1.0

    def __post_init__(self):
        super().__post_init__()
        if not self.period > 0:
            raise SpecError(f"Periodic: period must be positive, got {self.period}")

    @property
    def names(self):
        return ("c", "kappa", "period")

    def _correlation(self, lag):
        return np.exp(-2.0 * np.sin(np.pi * np.abs(lag) / self.period) ** 2 / self.kappa ** 2)

    def _log_partials(self, lag, value):
        s = np.pi * np.abs(lag) / self.period
        d_kappa = value * 4.0 * np.sin(s) ** 2 / self.kappa ** 2
        d_period = value * 2.0 * s * np.sin(2.0 * s) / self.kappa ** 2
        return [d_kappa, d_period]

    def natural(self):
        return (self.c, self.kappa, self.period)


@dataclass(frozen=True)
class BasisLowRank(KernelSpec):
    """K(t, t') = sum_h omega_h^2 phi_h(t) phi_h(t') with phi = (1, b_1, ..., b_D) on rescaled time."""
    weights: Tuple[float, ...] = ()
    basis: BasisSet = None

    stationary = False

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        object.__setattr__(self, "weights", weights)
        if self.basis is None:
            raise SpecError("BasisLowRank needs a basis")
        if len(weights) != self.basis.dim + 1 or not weights:
            raise SpecError(f"BasisLowRank needs {self.basis.dim + 1} weights, got {len(weights)}")

    @property
    def names(self):
        return tuple(f"omega{h + 1}" for h in range(len(self.weights)))

    def features(self, t) -> np.ndarray:
        return self.basis.design(t, scaled=True)

    def __call__(self, t, t2):
        w2 = np.asarray(self.weights) ** 2
        return (self.features(t) * w2) @ self.features(t2).T

    def gradient(self, t, t2):
        phi, phi2 = self.features(t), self.features(t2)
        w = np.asarray(self.weights)
        return np.stack([2.0 * w[h] * np.outer(phi[:, h], phi2[:, h]) for h in range(w.size)])

    def natural(self):
        return self.weights

    def with_natural(self, values):
        return BasisLowRank(tuple(values), self.basis)

    def free_params(self):
        return np.asarray(self.weights, dtype=float)

    def with_free_params(self, x):
        return self.with_natural(tuple(np.asarray(x, dtype=float)))

    def variance_scale(self):
        return float(np.sum(np.asarray(self.weights) ** 2)) or 1.0

    def diagonal(self, t):
        return np.sum(self.features(t) ** 2 * np.asarray(self.weights) ** 2, axis=1)


@dataclass(frozen=True)
class GramMatrix:
    points: np.ndarray
    matrix: np.ndarray
    jitter_applied: float
    factor: np.ndarray

    @property
    def size(self):
        return self.points.size

    def solve(self, b):
        return linalg.cho_solve((self.factor, True), b, check_finite=False)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.factor))))


def kernel_eval(spec: KernelSpec, t, t2) -> float:
    return float(spec([t], [t2])[0, 0])


def kernel_gradient(spec: KernelSpec, t, t2) -> np.ndarray:
    return spec.gradient([t], [t2])[:, 0, 0]


def gram(spec: KernelSpec, times) -> GramMatrix:
    """Gram matrix with the minimal jitter from the ladder that lets Cholesky succeed."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if times.size < 1 or not np.all(np.isfinite(times)):
        raise SpecError("gram needs at least one finite time point")
    matrix = spec(times, times)
    matrix = 0.5 * (matrix + matrix.T)
    factor, jitter = jittered_cholesky(matrix, spec.variance_scale(), points=times)
    if jitter:
        logger.warning("gram matrix over %d points needed jitter %.3g", times.size, jitter)
        matrix = matrix + jitter * np.eye(times.size)
    return GramMatrix(times, matrix, jitter, factor)
