"""Discrete Gaussian noise and zero-concentrated DP accounting.

Each client adds an exact integer-valued discrete Gaussian to its scaled
measurements; the sum of n such draws is close to one discrete Gaussian at
n times the variance, up to a convergence penalty kappa that the accountant
tracks in log space. Privacy is stated in zCDP (rho) and converted to
(epsilon, delta) on demand.
"""

from __future__ import annotations

import math
import random
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable

import numpy as np

_FOUR_PI_SQ = 4.0 * math.pi * math.pi
# beyond this many explicit kappa terms, the (decreasing) tail is bounded by
# count * largest remaining term; the bound is tight since k/(k+1) ~ 1 there
_KAPPA_EXPLICIT_TERMS = 1_000_000


@dataclass(frozen=True)
class PrivacyParams:
    """Target zCDP budget and the protocol shape it is split over."""

    rho: float
    n: int
    gamma: float
    delta2: float
    theta: float = 0.0

    def __post_init__(self):
        if not (self.rho > 0.0 and math.isfinite(self.rho)):
            raise ValueError("rho must be a positive finite number")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not (self.gamma > 0.0 and math.isfinite(self.gamma)):
            raise ValueError("gamma must be positive")
        if self.delta2 < 0.0 or not math.isfinite(self.delta2):
            raise ValueError("delta2 must be >= 0")
        if not (0.0 <= self.theta < 1.0):
            raise ValueError("theta must lie in [0, 1)")


@dataclass(frozen=True)
class PrivacyReport:
    """Accounting summary; realized_* fields reflect survivor degradation."""

    rho: float
    theta: float
    n: int
    gamma: float
    delta2: float
    per_client_sigma2: float
    kappa: float
    log10_kappa: float | None
    rho_prime: float
    epsilon: float
    delta: float
    zero_sensitivity: bool = False
    realized_survivors: int | None = None
    realized_rho_prime: float | None = None
    realized_epsilon: float | None = None
    degraded: bool = False

    def to_dict(self) -> dict:
        d = {
            "rho": self.rho,
            "theta": self.theta,
            "n": self.n,
            "gamma": self.gamma,
            "delta2": self.delta2,
            "per_client_sigma2": self.per_client_sigma2,
            "kappa": self.kappa,
            "log10_kappa": self.log10_kappa,
            "rho_prime": self.rho_prime,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "zero_sensitivity": self.zero_sensitivity,
            "degraded": self.degraded,
        }
        if self.realized_survivors is not None:
            d["realized_survivors"] = self.realized_survivors
            d["realized_rho_prime"] = self.realized_rho_prime
            d["realized_epsilon"] = self.realized_epsilon
        return d


def per_client_variance(params: PrivacyParams) -> float:
    """Integer-scale noise variance each client must add.

    sigma^2 = gamma^2 delta2^2 / (2 (1-theta) n rho): the 1/n split means the
    honest survivors jointly supply central-scale noise, and the (1-theta)
    factor compensates for corrupted clients whose noise cannot be trusted.
    """
    if params.delta2 == 0.0:
        warnings.warn("zero workload sensitivity: no noise is required", stacklevel=2)
        return 0.0
    return (params.gamma * params.delta2) ** 2 / (
        2.0 * (1.0 - params.theta) * params.n * params.rho
    )


def honest_count(params: PrivacyParams, survivors: int | None = None) -> int:
    """Clients whose noise the accountant may count: floor((1-theta) * n)."""
    n = params.n if survivors is None else survivors
    return int(math.floor((1.0 - params.theta) * n))


def log_kappa(params: PrivacyParams, survivors: int | None = None) -> float:
    """Natural log of the sum-vs-single discrete Gaussian divergence penalty.

    kappa = 5 * sum_{k=1}^{m-1} exp(-4 pi^2 sigma^2 k / (k+1)) with m honest
    clients and per-client variance sigma^2. Computed entirely in log space
    and rounded upward (kappa is a cost, so overestimating is sound).
    Returns -inf for an empty sum (m <= 1).
    """
    m = honest_count(params, survivors)
    if m <= 1:
        return -math.inf
    sigma2 = per_client_variance(params)
    coef = _FOUR_PI_SQ * sigma2
    terms = m - 1
    explicit = min(terms, _KAPPA_EXPLICIT_TERMS)
    k = np.arange(1, explicit + 1, dtype=np.float64)
    logs = -coef * (k / (k + 1.0))
    mx = float(logs[0])  # exponents decrease in k
    acc = float(np.exp(logs - mx).sum())
    if terms > explicit:
        tail_log = -coef * ((explicit + 1.0) / (explicit + 2.0))
        acc += (terms - explicit) * math.exp(tail_log - mx)
    out = math.log(5.0) + mx + math.log(acc)
    return math.nextafter(out, math.inf)


def kappa(params: PrivacyParams, survivors: int | None = None) -> float:
    """kappa as a float; underflows to 0.0 (see log_kappa for the magnitude)."""
    lk = log_kappa(params, survivors)
    if lk == -math.inf:
        return 0.0
    try:
        return math.exp(lk)
    except OverflowError:
        return math.inf


def zcdp_to_dp(rho: float, delta: float) -> float:
    """Standard zCDP-to-approximate-DP conversion: rho + 2 sqrt(rho ln(1/delta))."""
    if rho < 0.0:
        raise ValueError("rho must be >= 0")
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if rho == 0.0:
        return 0.0
    return rho + 2.0 * math.sqrt(rho * math.log(1.0 / delta))


def account(
    params: PrivacyParams,
    delta: float,
    survivors: int | None = None,
) -> PrivacyReport:
    """Full accounting: rho' = rho + kappa, epsilon at the given delta.

    When survivors is given and below n, the realized budget is recomputed at
    the smaller honest count (fewer noise shares arrived than planned) and the
    report is flagged as degraded.
    """
    lk = log_kappa(params)
    k = kappa(params)
    log10_k = None if lk == -math.inf else lk / math.log(10.0)
    rho_prime = params.rho + k
    eps = zcdp_to_dp(rho_prime, delta)
    zero_sens = params.delta2 == 0.0

    realized_survivors = None
    realized_rho_prime = None
    realized_eps = None
    degraded = False
    if survivors is not None and survivors != params.n:
        realized_survivors = survivors
        m_planned = honest_count(params)
        m_real = max(honest_count(params, survivors), 1)
        # same per-client sigma^2, fewer honest draws in the sum
        realized_rho = params.rho * m_planned / m_real
        realized_rho_prime = realized_rho + kappa(params, survivors)
        realized_eps = zcdp_to_dp(realized_rho_prime, delta)
        degraded = realized_rho_prime > rho_prime

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        sigma2 = per_client_variance(params)
    return PrivacyReport(
        rho=params.rho,
        theta=params.theta,
        n=params.n,
        gamma=params.gamma,
        delta2=params.delta2,
        per_client_sigma2=sigma2,
        kappa=k,
        log10_kappa=log10_k,
        rho_prime=rho_prime,
        epsilon=eps,
        delta=delta,
        zero_sensitivity=zero_sens,
        realized_survivors=realized_survivors,
        realized_rho_prime=realized_rho_prime,
        realized_epsilon=realized_eps,
        degraded=degraded,
    )


# ----------------------------------------------------------------------------
# Exact discrete Gaussian sampling.
#
# Rejection sampling from a discrete Laplace proposal with Bernoulli(exp(-x))
# acceptance, all arithmetic on integers, so the output distribution is the
# discrete Gaussian for the exact rational sigma^2 given (floats are taken at
# their exact binary value). No floating-point pmf enters the sampling path.
# ----------------------------------------------------------------------------


def _floorsqrt(num: int, den: int) -> int:
    """floor(sqrt(num/den)) for non-negative integers, exactly."""
    lo, hi = 0, 1
    while hi * hi * den <= num:
        hi *= 2
    while lo + 1 < hi:
        mid = (lo + hi) // 2
        if mid * mid * den <= num:
            lo = mid
        else:
            hi = mid
    return lo


def _bernoulli(num: int, den: int, rng) -> int:
    # P(1) = num/den, 0 <= num <= den
    return 1 if rng.randrange(den) < num else 0


def _bernoulli_exp1(num: int, den: int, rng) -> int:
    # P(1) = exp(-num/den) for num/den in [0, 1]
    k = 1
    while _bernoulli(num, den * k, rng):
        k += 1
    return k % 2


def _bernoulli_exp(num: int, den: int, rng) -> int:
    # P(1) = exp(-num/den) for any num/den >= 0
    while num > den:
        if not _bernoulli_exp1(1, 1, rng):
            return 0
        num -= den
    return _bernoulli_exp1(num, den, rng)


def _geometric_exp(num: int, den: int, rng) -> int:
    # Geometric(1 - exp(-num/den)) on {0, 1, ...}
    t = den
    while True:
        u = rng.randrange(t)
        if _bernoulli_exp(u, t, rng):
            break
    v = 0
    while _bernoulli_exp(1, 1, rng):
        v += 1
    return (v * t + u) // num


def _discrete_laplace(t: int, rng) -> int:
    # P(x) proportional to exp(-|x|/t), integer scale t >= 1
    while True:
        negative = rng.randrange(2)
        magnitude = _geometric_exp(1, t, rng)
        if negative and magnitude == 0:
            continue  # zero already produced on the positive branch
        return -magnitude if negative else magnitude


def _sigma2_as_ratio(sigma2) -> tuple[int, int]:
    if isinstance(sigma2, int):
        num, den = sigma2, 1
    else:
        frac = Fraction(sigma2)  # exact for floats and Fractions alike
        num, den = frac.numerator, frac.denominator
    if num <= 0:
        raise ValueError("sigma2 must be positive")
    return num, den


def sample_discrete_gaussian(sigma2, rng=None, size: int | None = None):
    """Draw from N_Z(0, sigma2), P(x) proportional to exp(-x^2 / (2 sigma2)).

    sigma2 may be an int, Fraction, or float (used at its exact binary value).
    rng needs only a randrange method; defaults to SystemRandom. With size=None
    a single int is returned, otherwise an int64 array of that length.
    """
    num, den = _sigma2_as_ratio(sigma2)
    if rng is None:
        rng = random.SystemRandom()
    t = _floorsqrt(num, den) + 1
    # acceptance exponent (|y| - sigma2/t)^2 / (2 sigma2), as one integer ratio
    bias_den = 2 * num * den * t * t

    def one() -> int:
        while True:
            y = _discrete_laplace(t, rng)
            r = abs(y) * t * den - num
            if _bernoulli_exp(r * r, bias_den, rng):
                return y

    if size is None:
        return one()
    if size < 0:
        raise ValueError("size must be >= 0")
    return np.fromiter((one() for _ in range(size)), dtype=np.int64, count=size)


def sample_continuous_gaussian(sigma2: float, rng: np.random.Generator, size=None):
    """Plain N(0, sigma2) draws for the central baseline."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    return rng.normal(0.0, math.sqrt(sigma2), size=size)


def discrete_gaussian_pmf(support: np.ndarray, sigma2: float) -> np.ndarray:
    """Reference pmf on the given integer support, normalized over |z| <= 20 sigma.

    Test oracle only; the sampling path never touches this.
    """
    sigma = math.sqrt(sigma2)
    halfwidth = max(int(math.ceil(20.0 * sigma)), 20)
    z = np.arange(-halfwidth, halfwidth + 1, dtype=np.float64)
    weights = np.exp(-(z * z) / (2.0 * sigma2))
    total = weights.sum()
    out = np.exp(-(support.astype(np.float64) ** 2) / (2.0 * sigma2)) / total
    return out
