"""Closed-form point-process and distribution math.

The gap model is an exponential-affine intensity lam(g) = exp(a + wt * g)
over the elapsed absence gap g >= 0.  For wt < 0 the gap distribution is
defective: total mass 1 - exp(-exp(a)/|wt|), the remainder being "never
returns".  Samplers use exact inverse-CDF inversion; there is no thinning.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np
from scipy import integrate

from .errors import NumericalError

WT_ZERO_EPS = 1e-8  # |wt| below this is treated as exactly zero


class IntensitySpec(NamedTuple):
    """Evaluated intensity parameters: lam(g) = exp(a + wt * g)."""

    a: float
    wt: float = 0.0


class GaussianParams(NamedTuple):
    """Mean / std of a Gaussian in logit space (prior or posterior of z)."""

    mu: float
    sigma: float


def cumulative_intensity(spec, g):
    """Integral of lam over [0, g]; nonnegative and increasing in g."""
    if g < 0.0:
        raise ValueError(f"cumulative_intensity: negative gap {g}")
    a, wt = spec
    ea = math.exp(a)
    if abs(wt) < WT_ZERO_EPS:
        return ea * g
    x = wt * g
    if x > 700.0:
        raise NumericalError("cumulative_intensity: exp overflow")
    return ea * math.expm1(x) / wt


def total_mass(spec):
    """Probability that a next gap occurs at all (< 1 only when wt < 0)."""
    a, wt = spec
    if wt >= -WT_ZERO_EPS:
        return 1.0
    return -math.expm1(-math.exp(a) / abs(wt))


_LOG_DENSITY_FLOOR = -1e308  # stands in for log(0) while staying finite


def log_gap_density(spec, g):
    """log f*(g) = a + wt*g - cumulative_intensity(g).

    For a rising intensity the density decays super-exponentially; once the
    cumulative intensity exceeds float range the true log density is below
    anything representable and the finite floor -1e308 is returned (its exp
    is exactly 0.0), which keeps tail quadrature well defined.
    """
    if g < 0.0:
        raise ValueError(f"log_gap_density: negative gap {g}")
    a, wt = spec
    if wt > WT_ZERO_EPS and wt * g > 700.0:
        return _LOG_DENSITY_FLOOR
    val = a + (0.0 if abs(wt) < WT_ZERO_EPS else wt * g) - cumulative_intensity(spec, g)
    if not math.isfinite(val):
        raise NumericalError(f"log_gap_density: non-finite at g={g}")
    return max(val, _LOG_DENSITY_FLOOR)


def expected_gap(spec, mode="closed"):
    """Mean next gap; for wt < 0 the mean is conditional on returning.

    mode="closed" uses exp(-a) when wt is (effectively) zero and falls back
    to quadrature otherwise; mode="quadrature" always integrates.
    """
    a, wt = spec
    if mode not in ("closed", "quadrature"):
        raise ValueError(f"expected_gap: unknown mode {mode!r}")
    if mode == "closed" and abs(wt) < WT_ZERO_EPS:
        return math.exp(-a)

    def integrand(g):
        return g * math.exp(log_gap_density(spec, g))

    # scale of the distribution, used to bound the integration range
    scale = math.exp(-a)
    upper = np.inf if wt >= 0.0 else min(700.0 / abs(wt), 200.0 * scale + 100.0 / abs(wt))
    val, err, info = integrate.quad(integrand, 0.0, upper, epsrel=1e-6, limit=200, full_output=True)[:3]
    if "last" not in info or (val != 0.0 and err / max(abs(val), 1e-300) > 1e-4):
        raise NumericalError("expected_gap: quadrature did not converge")
    mass = total_mass(spec)
    return val / mass


def sample_gap(spec, rng):
    """Inverse-CDF draw of the next gap; returns math.inf for "never returns".

    Solves cumulative_intensity(g) = -log(u) with u uniform on (0, 1].  When
    wt < 0 the inversion has no solution with probability exp(-exp(a)/|wt|)
    and the caller gets math.inf, a distinct value it must handle.
    """
    a, wt = spec
    u = 1.0 - rng.random()  # in (0, 1]; u == 1 maps to g == 0
    e = -math.log(u)
    if abs(wt) < WT_ZERO_EPS:
        return e * math.exp(-a)
    arg = 1.0 + e * wt * math.exp(-a)
    if arg <= 0.0:
        return math.inf
    return math.log(arg) / wt


def poisson_log_pmf(rate, k):
    """log Poisson pmf via log-gamma; rate > 0, integer k >= 0."""
    if rate <= 0.0:
        raise ValueError(f"poisson_log_pmf: rate must be positive, got {rate}")
    if k < 0 or k != int(k):
        raise ValueError(f"poisson_log_pmf: k must be a nonnegative integer, got {k}")
    return k * math.log(rate) - rate - math.lgamma(k + 1.0)


def zt_poisson_log_pmf(rate, k):
    """log pmf of a zero-truncated Poisson (support k >= 1)."""
    if k < 1:
        raise ValueError(f"zt_poisson_log_pmf: k must be >= 1, got {k}")
    return poisson_log_pmf(rate, k) - math.log(-math.expm1(-rate))


def sample_zt_poisson(rate, rng):
    """Inverse-CDF draw from a zero-truncated Poisson."""
    if rate <= 0.0:
        raise ValueError(f"sample_zt_poisson: rate must be positive, got {rate}")
    u = rng.random()
    # walk the truncated CDF starting at k = 1
    log_norm = math.log(-math.expm1(-rate))
    k = 1
    pmf = math.exp(math.log(rate) - rate - log_norm)
    cdf = pmf
    while cdf < u:
        k += 1
        pmf *= rate / k
        cdf += pmf
        if k > 10_000_000:
            raise NumericalError("sample_zt_poisson: runaway CDF walk")
    return k


def gaussian_kl(q, p):
    """Closed-form KL(q || p) between univariate Gaussians; >= 0, 0 iff q == p.

    Because logit-normal variables are deterministic bijections of their
    underlying Gaussians, this is also the KL between the matching
    logit-normal laws.
    """
    if q.sigma <= 0.0 or p.sigma <= 0.0:
        raise ValueError(f"gaussian_kl: non-positive std ({q.sigma}, {p.sigma})")
    d = q.mu - p.mu
    return math.log(p.sigma / q.sigma) + (q.sigma**2 + d * d) / (2.0 * p.sigma**2) - 0.5


def sample_logit_normal(params, eps):
    """Reparameterized draw z = sigmoid(mu + sigma * eps), strictly in (0, 1)."""
    if params.sigma <= 0.0:
        raise ValueError(f"sample_logit_normal: non-positive std {params.sigma}")
    v = params.mu + params.sigma * eps
    if v >= 0.0:
        z = 1.0 / (1.0 + math.exp(-v))
    else:
        e = math.exp(v)
        z = e / (1.0 + e)
    return min(max(z, 1e-15), float(np.nextafter(1.0, 0.0)))
