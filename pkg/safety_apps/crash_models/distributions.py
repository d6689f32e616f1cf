"""
Probability primitives for the crash-frequency models.

Parameterizations used throughout:
  - Gamma(shape, rate)
  - Negative Binomial by mean μ and inverse dispersion φ, Var = μ + μ²/φ
  - Lindley(θ) with density θ²/(θ+1)·(1+x)·e^{−θx}
  - Generalized Exponential(a, b) with density a·b·(1−e^{−bx})^{a−1}·e^{−bx}

Density and moment functions are pure and vectorized over numpy arrays.
Samplers take an explicit ``numpy.random.Generator`` so each chain owns its
random source.
"""

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import special, stats

ArrayLike = Union[float, np.ndarray]


class DistributionDomainError(ValueError):
    """A parameter or argument lies outside the support of a distribution."""


# ── Parameter types ──────────────────────────────────────────────────────────

@dataclass(frozen=True)
class LindleyParam:
    theta: float

    def __post_init__(self):
        _positive('theta', self.theta)


@dataclass(frozen=True)
class NbParam:
    mean: float
    inverse_dispersion: float

    def __post_init__(self):
        _positive('mean', self.mean)
        _positive('inverse_dispersion', self.inverse_dispersion)

    @property
    def variance(self) -> float:
        return self.mean + self.mean ** 2 / self.inverse_dispersion


@dataclass(frozen=True)
class GeParam:
    a: float
    b: float

    def __post_init__(self):
        _positive('a', self.a)
        _positive('b', self.b)


def _positive(name, value):
    if not np.isfinite(value) or value <= 0:
        raise DistributionDomainError(f"{name} must be a positive finite number, got {value!r}")


def _theta(theta) -> float:
    if isinstance(theta, LindleyParam):
        return theta.theta
    _positive('theta', theta)
    return float(theta)


def _nonnegative(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(~np.isfinite(arr)):
        raise DistributionDomainError("x must be finite and non-negative")
    return arr


def _scalar_or_array(value):
    return float(value) if np.ndim(value) == 0 else value


# ── Lindley ──────────────────────────────────────────────────────────────────

def lindley_logpdf(x: ArrayLike, theta) -> ArrayLike:
    t = _theta(theta)
    arr = _nonnegative(x)
    out = 2.0 * math.log(t) - math.log1p(t) + np.log1p(arr) - t * arr
    return _scalar_or_array(out)


def lindley_pdf(x: ArrayLike, theta) -> ArrayLike:
    return _scalar_or_array(np.exp(lindley_logpdf(x, theta)))


def lindley_moment(theta, k: int = 1) -> float:
    """k-th raw moment: k!·(θ + k + 1) / (θ^k·(θ + 1))."""
    t = _theta(theta)
    if int(k) != k or k < 1:
        raise DistributionDomainError(f"moment order must be a positive integer, got {k!r}")
    if k == 1:
        return (t + 2.0) / (t * (t + 1.0))
    return math.factorial(k) * (t + k + 1.0) / (t ** k * (t + 1.0))


def lindley_mean(theta) -> ArrayLike:
    """Vectorized E(λ|θ); accepts an array of θ draws."""
    t = np.asarray(theta, dtype=float)
    if np.any(t <= 0):
        raise DistributionDomainError("theta must be positive")
    return _scalar_or_array((t + 2.0) / (t * (t + 1.0)))


def lindley_sample(theta, rng: np.random.Generator, size=None) -> ArrayLike:
    """z ~ Bernoulli(1/(1+θ)), then Gamma(shape=1+z, rate=θ)."""
    t = _theta(theta)
    z = rng.random(size) < 1.0 / (1.0 + t)
    return rng.gamma(1.0 + z, 1.0 / t, size=size)


def lindley_sample_mixture(theta, rng: np.random.Generator, size=None) -> ArrayLike:
    """
    Two-component form: Exponential(θ) with weight θ/(1+θ), and the sum of two
    independent Exponential(θ) draws, i.e. Gamma(2, θ), with weight 1/(1+θ).
    """
    t = _theta(theta)
    first = rng.exponential(1.0 / t, size=size)
    second = rng.exponential(1.0 / t, size=size)
    pick = rng.random(size) < 1.0 / (1.0 + t)
    return _scalar_or_array(first + np.where(pick, second, 0.0))


# ── Negative Binomial ────────────────────────────────────────────────────────

def nb_logpmf(y: ArrayLike, mean: ArrayLike, inverse_dispersion: ArrayLike) -> ArrayLike:
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mean, dtype=float)
    phi = np.asarray(inverse_dispersion, dtype=float)
    if np.any(y < 0) or np.any(y != np.floor(y)):
        raise DistributionDomainError("y must be a non-negative integer")
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise DistributionDomainError("mean and inverse_dispersion must be positive")
    out = (
        special.gammaln(y + phi) - special.gammaln(phi) - special.gammaln(y + 1.0)
        - phi * np.log1p(mu / phi)
        + y * (np.log(mu) - np.log(phi + mu))
    )
    return _scalar_or_array(out)


def nb_pmf(y: ArrayLike, p: NbParam) -> ArrayLike:
    return _scalar_or_array(np.exp(nb_logpmf(y, p.mean, p.inverse_dispersion)))


def nb_sample(p: NbParam, rng: np.random.Generator, size=None) -> ArrayLike:
    """Gamma-Poisson mixture."""
    phi = p.inverse_dispersion
    rate = rng.gamma(phi, p.mean / phi, size=size)
    return rng.poisson(rate)


def nb_tail_truncation(p: NbParam, tail: float = 1e-12) -> int:
    """Smallest y_max with P(Y > y_max) below ``tail``."""
    phi = p.inverse_dispersion
    prob = phi / (phi + p.mean)
    y_max = max(1, int(np.ceil(p.mean)))
    while stats.nbinom.sf(y_max, phi, prob) >= tail:
        y_max *= 2
    return y_max


# ── Generalized Exponential ──────────────────────────────────────────────────

def ge_logpdf(x: ArrayLike, p: GeParam) -> ArrayLike:
    arr = _nonnegative(x)
    with np.errstate(divide='ignore'):
        out = (
            math.log(p.a) + math.log(p.b)
            + special.xlogy(p.a - 1.0, -np.expm1(-p.b * arr))
            - p.b * arr
        )
    return _scalar_or_array(out)


def ge_pdf(x: ArrayLike, p: GeParam) -> ArrayLike:
    return _scalar_or_array(np.exp(ge_logpdf(x, p)))


def ge_mean(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """(ψ(a+1) − ψ(1)) / b; vectorized over draws."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return _scalar_or_array((special.digamma(a + 1.0) - special.digamma(1.0)) / b)


def ge_sample(p: GeParam, rng: np.random.Generator, size=None) -> ArrayLike:
    """Inverse CDF: x = −ln(1 − u^{1/a}) / b."""
    u = rng.random(size)
    return -np.log1p(-u ** (1.0 / p.a)) / p.b
