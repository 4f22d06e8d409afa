"""Location-scale output heads: Student's t with 3 degrees of freedom and Gaussian."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .tensor import Tensor, as_tensor

STUDENT_T3 = "student_t3"
GAUSSIAN = "gaussian"
FAMILIES = (STUDENT_T3, GAUSSIAN)

T3_LOG_NORM = math.log(2.0 / (math.pi * math.sqrt(3.0)))
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
SQRT3 = math.sqrt(3.0)


def t3_pdf(y):
    """Standard t(3) density ``2 / (pi sqrt(3) (1 + y^2/3)^2)``."""
    y = np.asarray(y, dtype=np.float64)
    return 2.0 / (math.pi * SQRT3 * (1.0 + y * y / 3.0) ** 2)


def t3_logpdf(y):
    y = np.asarray(y, dtype=np.float64)
    return T3_LOG_NORM - 2.0 * np.log1p(y * y / 3.0)


def t3_cdf(y):
    """Closed-form t(3) CDF: 1/2 + (u/(1+u^2) + arctan u)/pi with u = y/sqrt(3)."""
    u = np.asarray(y, dtype=np.float64) / SQRT3
    return 0.5 + (u / (1.0 + u * u) + np.arctan(u)) / math.pi


def t3_quantile(p, tol: float = 1e-12, max_iter: int = 400):
    """Inverse t(3) CDF by bracketed bisection on :func:`t3_cdf`.

    Iterates until every bracket is narrower than ``tol * max(1, |q|)``,
    which keeps the absolute error well under 1e-10 for |q| < 100.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0.0) | (p >= 1.0)):
        raise ValueError("quantile level must lie strictly inside (0, 1)")
    lo = np.full(p.shape, -1.0)
    hi = np.full(p.shape, 1.0)
    while np.any(t3_cdf(lo) > p):
        lo = np.where(t3_cdf(lo) > p, lo * 2.0, lo)
    while np.any(t3_cdf(hi) < p):
        hi = np.where(t3_cdf(hi) < p, hi * 2.0, hi)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        below = t3_cdf(mid) < p
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol * np.maximum(1.0, np.abs(mid))):
            break
    q = 0.5 * (lo + hi)
    # exact symmetry at the median
    return np.where(p == 0.5, 0.0, q)


def standard_quantile(family: str, p):
    if family == STUDENT_T3:
        return t3_quantile(p)
    if family == GAUSSIAN:
        p = np.asarray(p, dtype=np.float64)
        if np.any((p <= 0.0) | (p >= 1.0)):
            raise ValueError("quantile level must lie strictly inside (0, 1)")
        return ndtri(p)
    raise ValueError(f"unknown distribution family {family!r}")


def standard_cdf(family: str, z):
    if family == STUDENT_T3:
        return t3_cdf(z)
    if family == GAUSSIAN:
        return ndtr(np.asarray(z, dtype=np.float64))
    raise ValueError(f"unknown distribution family {family!r}")


def _check_nll_inputs(y, mu, sigma):
    y, mu, sigma = as_tensor(y), as_tensor(mu), as_tensor(sigma)
    if not (y.shape == mu.shape == sigma.shape):
        raise ValueError(f"shape mismatch: y {y.shape}, mu {mu.shape}, sigma {sigma.shape}")
    if np.any(sigma.data <= 0.0):
        raise ValueError("sigma must be strictly positive")
    return y, mu, sigma


def t3_nll(y, mu, sigma) -> Tensor:
    """Mean over elements of ``-log f((y - mu)/sigma) + log sigma`` for t(3)."""
    y, mu, sigma = _check_nll_inputs(y, mu, sigma)
    s = sigma.data
    z = (y.data - mu.data) / s
    q = 1.0 + z * z / 3.0
    n = z.size
    value = np.array((-T3_LOG_NORM + 2.0 * np.log1p(z * z / 3.0) + np.log(s)).mean())

    def backward(g):
        dz = (4.0 / 3.0) * z / q  # d(-log f)/dz
        gy = g * dz / s / n
        return gy, -gy, g * (1.0 - dz * z) / s / n

    return Tensor._make(value, (y, mu, sigma), backward, "t3_nll")


def gaussian_nll(y, mu, sigma) -> Tensor:
    """Mean over elements of ``0.5 z^2 + log sigma + 0.5 log 2 pi``."""
    y, mu, sigma = _check_nll_inputs(y, mu, sigma)
    s = sigma.data
    z = (y.data - mu.data) / s
    n = z.size
    value = np.array((0.5 * z * z + np.log(s) + HALF_LOG_2PI).mean())

    def backward(g):
        gy = g * z / s / n
        return gy, -gy, g * (1.0 - z * z) / s / n

    return Tensor._make(value, (y, mu, sigma), backward, "gaussian_nll")


def nll(family: str, y, mu, sigma) -> Tensor:
    if family == STUDENT_T3:
        return t3_nll(y, mu, sigma)
    if family == GAUSSIAN:
        return gaussian_nll(y, mu, sigma)
    raise ValueError(f"unknown distribution family {family!r}")


@dataclass
class ForecastDistribution:
    family: str
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown distribution family {self.family!r}")
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must share a shape")

    def quantile(self, p: float) -> np.ndarray:
        return quantile(self, p)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return sample(self, rng)


def quantile(dist: ForecastDistribution, p: float) -> np.ndarray:
    """``mu + sigma * Q(p)`` elementwise."""
    return dist.mu + dist.sigma * standard_quantile(dist.family, p)


def sample(dist: ForecastDistribution, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw, one value per element of ``dist.mu``."""
    u = rng.random(dist.mu.shape)
    # rng.random is in [0, 1); 0 has probability ~2^-53 but would break the quantile
    u = np.where(u == 0.0, np.nextafter(0.0, 1.0), u)
    return dist.mu + dist.sigma * standard_quantile(dist.family, u)
