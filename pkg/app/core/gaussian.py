"""
Multivariate-normal machinery shared by fitting, simulation and curve inference.

Every covariance is factorised once (lower Cholesky via the jitter ladder in
`app.core.kernels`) and all solves reuse that factor.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import linalg
from scipy.special import ndtr, ndtri

from app.core.dataset import DomainError, LGPError, NumericalError
from app.core.kernels import GramMatrix, KernelSpec, gram, jittered_cholesky
from app.core.mean_basis import MeanSpec

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
VARIANCE_ROUNDOFF = 1e-10
TAIL_SWITCH = 4.0


class DimensionError(LGPError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianSurrogate:
    """Finite-dimensional law N(mean, cov) of the latent curve at S time points."""
    mean: np.ndarray
    cov: GramMatrix

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        if mean.size != self.cov.size:
            raise DimensionError(f"mean has {mean.size} entries, covariance is {self.cov.size}x{self.cov.size}")
        object.__setattr__(self, "mean", mean)

    @classmethod
    def from_covariance(cls, mean, matrix, points=None):
        matrix = np.asarray(matrix, dtype=float)
        matrix = 0.5 * (matrix + matrix.T)
        scale = float(np.max(np.abs(np.diag(matrix)))) if matrix.size else 1.0
        factor, jitter = jittered_cholesky(matrix, scale, points=points)
        if jitter:
            matrix = matrix + jitter * np.eye(matrix.shape[0])
        if points is None:
            points = np.arange(matrix.shape[0], dtype=float)
        return cls(mean, GramMatrix(np.asarray(points, dtype=float), matrix, jitter, factor))

    @classmethod
    def from_model(cls, mean_spec: MeanSpec, kernel_spec: KernelSpec, times):
        times = np.atleast_1d(np.asarray(times, dtype=float))
        return cls(mean_spec.evaluate(times), gram(kernel_spec, times))

    @property
    def dim(self):
        return self.mean.size


def mvn_logpdf(x, surrogate: GaussianSurrogate) -> float:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != surrogate.dim:
        raise DimensionError(f"point has {x.size} entries, distribution has dimension {surrogate.dim}")
    z = linalg.solve_triangular(surrogate.cov.factor, x - surrogate.mean, lower=True, check_finite=False)
    value = -0.5 * (x.size * LOG_2PI + surrogate.cov.logdet() + float(z @ z))
    if not np.isfinite(value):
        raise NumericalError("non-finite Gaussian log-density")
    return value


def mvn_sample(surrogate: GaussianSurrogate, rng, size=None) -> np.ndarray:
    """One draw (shape (S,)) or `size` draws (shape (size, S))."""
    if size is None:
        return surrogate.mean + surrogate.cov.factor @ rng.standard_normal(surrogate.dim)
    z = rng.standard_normal((int(size), surrogate.dim))
    return surrogate.mean + z @ surrogate.cov.factor.T


def _clamp_variance(values, prior_variance):
    values = np.asarray(values, dtype=float)
    tolerance = VARIANCE_ROUNDOFF * np.maximum(1.0, prior_variance)
    if np.any(values < -tolerance):
        worst = float(np.min(values))
        raise NumericalError(f"conditional variance {worst:.3g} is negative beyond round-off")
    return np.clip(values, 0.0, None)


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    """
    Law of theta(t*) given theta at the conditioning times: mean m(t*) + weights . (theta - prior_mean),
    variance sigma2 (does not depend on the conditioning values).
    """
    t_star: float
    m_star: float
    prior_mean: np.ndarray
    weights: np.ndarray
    sigma2: float

    def mu(self, theta) -> np.ndarray:
        """Conditional mean for one vector (S,) or a stack of draws (L, S)."""
        theta = np.asarray(theta, dtype=float)
        return self.m_star + (theta - self.prior_mean) @ self.weights

    @property
    def sd(self):
        return float(np.sqrt(self.sigma2))


@dataclass(frozen=True, eq=False)
class ConditionalGrid:
    """ConditionalGaussian for every point of a grid at once; weights is (G, S)."""
    grid: np.ndarray
    m_grid: np.ndarray
    prior_mean: np.ndarray
    weights: np.ndarray
    sigma2: np.ndarray

    def mu(self, theta) -> np.ndarray:
        """(G,) for a single vector, (L, G) for a stack of draws."""
        theta = np.asarray(theta, dtype=float)
        return self.m_grid + (theta - self.prior_mean) @ self.weights.T

    def at(self, k) -> ConditionalGaussian:
        return ConditionalGaussian(
            float(self.grid[k]), float(self.m_grid[k]), self.prior_mean, self.weights[k], float(self.sigma2[k])
        )


def conditional_grid(grid, times, mean_spec: MeanSpec, kernel_spec: KernelSpec) -> ConditionalGrid:
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    times = np.atleast_1d(np.asarray(times, dtype=float))
    m_grid = mean_spec.evaluate(grid)
    prior_var = kernel_spec.diagonal(grid)
    if times.size == 0:
        return ConditionalGrid(grid, m_grid, np.zeros(0), np.zeros((grid.size, 0)), prior_var)
    observed = gram(kernel_spec, times)
    cross = kernel_spec(times, grid)
    weights = observed.solve(cross).T
    sigma2 = _clamp_variance(prior_var - np.sum(weights * cross.T, axis=1), prior_var)
    return ConditionalGrid(grid, m_grid, mean_spec.evaluate(times), weights, sigma2)


def conditional_at(t_star, times, mean_spec: MeanSpec, kernel_spec: KernelSpec) -> ConditionalGaussian:
    return conditional_grid([t_star], times, mean_spec, kernel_spec).at(0)


class EvidenceFactor:
    """
    Gaussian prior N(mu, K) on latent values updated by independent linear-Gaussian evidence.

    Evidence enters per latent value through its precision d_s (sum of loading^2 / noise variance)
    and its score u_s (sum of loading * (value - offset) / noise variance). With w = sqrt(d) the
    update only needs M = I + diag(w) K diag(w), which is factorised once per precision vector.
    """

    def __init__(self, prior: GaussianSurrogate, precision):
        precision = np.asarray(precision, dtype=float).reshape(-1)
        if precision.size != prior.dim:
            raise DimensionError(f"precision has {precision.size} entries, prior has dimension {prior.dim}")
        if np.any(precision < 0) or not np.all(np.isfinite(precision)):
            raise NumericalError("evidence precision must be finite and non-negative")
        self.prior = prior
        self.precision = precision
        self.w = np.sqrt(precision)
        kernel = prior.cov.matrix
        self._kw = kernel * self.w[None, :]
        inner = np.eye(prior.dim) + self.w[:, None] * self._kw
        self._m_factor = linalg.cholesky(inner, lower=True, check_finite=False)
        self._cov = None
        self._cov_factor = None

    def _solve_m(self, b):
        return linalg.cho_solve((self._m_factor, True), b, check_finite=False)

    def logdet_m(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self._m_factor))))

    def whitened_residual(self, score) -> np.ndarray:
        """r_s = (u_s - d_s mu_s) / w_s, zero where no evidence falls."""
        score = np.asarray(score, dtype=float).reshape(-1)
        residual = score - self.precision * self.prior.mean
        out = np.zeros_like(residual)
        seen = self.w > 0
        out[seen] = residual[seen] / self.w[seen]
        return out

    def mean(self, score) -> np.ndarray:
        r = self.whitened_residual(score)
        return self.prior.mean + self._kw @ self._solve_m(r)

    def covariance(self) -> np.ndarray:
        if self._cov is None:
            kernel = self.prior.cov.matrix
            cov = kernel - self._kw @ self._solve_m(self._kw.T)
            self._cov = 0.5 * (cov + cov.T)
        return self._cov

    def sample(self, score, rng) -> np.ndarray:
        if self._cov_factor is None:
            scale = float(np.max(np.diag(self.prior.cov.matrix)))
            self._cov_factor, _ = jittered_cholesky(self.covariance(), scale, points=self.prior.cov.points)
        return self.mean(score) + self._cov_factor @ rng.standard_normal(self.prior.dim)

    def predict(self, cross, m_grid, prior_var, score) -> Tuple[np.ndarray, np.ndarray]:
        """
        Mean and variance at new points given the evidence; `cross` is K(times, grid) of shape (S, G).
        """
        r = self.whitened_residual(score)
        projected = self.w[:, None] * np.asarray(cross, dtype=float)
        solved = self._solve_m(projected)
        mean = np.asarray(m_grid, dtype=float) + projected.T @ self._solve_m(r)
        variance = np.asarray(prior_var, dtype=float) - np.sum(projected * solved, axis=0)
        return mean, _clamp_variance(variance, prior_var)

    def quadratic(self, score) -> float:
        """r'M^{-1}r - r'r, the latent-value correction to a Gaussian evidence log-likelihood."""
        r = self.whitened_residual(score)
        return float(r @ self._solve_m(r) - r @ r)


def _tail_draw(a, b, rng):
    """Standard normal restricted to [a, b) with a >= TAIL_SWITCH."""
    if np.isfinite(b) and (b - a) * a < 1.0:
        while True:
            z = rng.uniform(a, b)
            if rng.uniform() <= np.exp(0.5 * (a * a - z * z)):
                return z
    rate = 0.5 * (a + np.sqrt(a * a + 4.0))
    while True:
        z = a + rng.exponential(1.0 / rate)
        if z >= b:
            continue
        if rng.uniform() <= np.exp(-0.5 * (z - rate) ** 2):
            return z


def _standard_truncated(a, b, rng):
    if a >= TAIL_SWITCH:
        return _tail_draw(a, b, rng)
    if b <= -TAIL_SWITCH:
        return -_tail_draw(-b, -a, rng)
    u = rng.uniform()
    if a > 0:
        upper, lower = ndtr(-a), ndtr(-b)
        z = -ndtri(upper - u * (upper - lower))
    else:
        lower, upper = ndtr(a), ndtr(b)
        z = ndtri(lower + u * (upper - lower))
    return float(np.clip(z, a, np.nextafter(b, -np.inf) if np.isfinite(b) else b))


def truncnorm_sample(mu, interval, rng) -> float:
    """Draw from N(mu, 1) restricted to [lo, hi); either end may be infinite."""
    lo, hi = (float(v) for v in interval)
    if not lo < hi:
        raise DomainError(f"empty truncation interval [{lo}, {hi})")
    return float(mu) + _standard_truncated(lo - float(mu), hi - float(mu), rng)


def truncnorm_sample_many(mu, lo, hi, rng) -> np.ndarray:
    """Elementwise truncnorm_sample; body draws are vectorised, tail draws fall back to rejection."""
    mu, lo, hi = np.broadcast_arrays(*(np.atleast_1d(np.asarray(v, dtype=float)) for v in (mu, lo, hi)))
    if np.any(~(lo < hi)):
        raise DomainError("empty truncation interval")
    a, b = lo - mu, hi - mu
    out = np.empty(mu.shape)
    tail = (a >= TAIL_SWITCH) | (b <= -TAIL_SWITCH)
    body = ~tail
    if np.any(body):
        ab, bb = a[body], b[body]
        u = rng.uniform(size=ab.size)
        right = ab > 0
        z = np.empty(ab.size)
        upper, lower = ndtr(-ab[right]), ndtr(-bb[right])
        z[right] = -ndtri(upper - u[right] * (upper - lower))
        lower, upper = ndtr(ab[~right]), ndtr(bb[~right])
        z[~right] = ndtri(lower + u[~right] * (upper - lower))
        out[body] = np.clip(z, ab, bb)
    for index in zip(*np.nonzero(tail)):
        out[index] = _standard_truncated(a[index], b[index], rng)
    return mu + out
