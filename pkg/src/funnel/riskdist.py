"""Discriminant risk distribution on [0, 1].

A risk draw ``p`` is produced by a two-class Gaussian signal model::

    Y ~ Bern(phi),  X | Y=0 ~ N(0, 1),  X | Y=1 ~ N(delta, 1),  p = g(X)

where ``g(x) = Pr(Y=1 | X=x)``.  The distribution has mean ``phi`` and every
probability or conditional mean over an interval of ``p`` reduces to normal
CDFs evaluated at ``g^{-1}`` of the interval endpoints.

All functions broadcast over numpy arrays of thresholds.  Interval masses are
carried in log space because likelihoods multiply many of them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, logit

DELTA_MIN = 1e-4
T_CLAMP = 1e-12

_LOG_2PI_HALF = 0.5 * np.log(2.0 * np.pi)


class ConditioningError(ValueError):
    """Raised when a conditional mean is requested on an event of zero mass."""


@dataclass(frozen=True)
class RiskDistributionParams:
    phi: float
    delta: float

    def __post_init__(self):
        if not (0.0 < self.phi < 1.0):
            raise ValueError(f"phi must lie in (0, 1), got {self.phi}")
        if not (np.isfinite(self.delta) and self.delta >= DELTA_MIN):
            raise ValueError(f"delta must be finite and >= {DELTA_MIN}, got {self.delta}")

    @property
    def logit_phi(self) -> float:
        return float(logit(self.phi))


# -- normal helpers ----------------------------------------------------------

def log_normal_pdf(z):
    z = np.asarray(z, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = -0.5 * z * z - _LOG_2PI_HALF
    return np.where(np.isinf(z), -np.inf, out)


def log1mexp(x):
    """log(1 - exp(x)) for x <= 0, accurate across the whole range."""
    x = np.asarray(x, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def log_ndtr_diff(a, b):
    """log(Phi(b) - Phi(a)) for a <= b, stable in both tails.

    Either endpoint may be infinite.  Returns -inf when a == b.
    """
    a, b = np.broadcast_arrays(np.asarray(a, dtype=float), np.asarray(b, dtype=float))
    out = np.empty(a.shape, dtype=float)
    upper = a >= 0.0  # both in the right tail: reflect
    lower = b <= 0.0
    mid = ~(upper | lower)
    with np.errstate(divide="ignore", invalid="ignore"):
        if np.any(lower):
            lb = log_ndtr(b[lower])
            la = log_ndtr(a[lower])
            out[lower] = lb + log1mexp(la - lb)
        if np.any(upper):
            la = log_ndtr(-a[upper])
            lb = log_ndtr(-b[upper])
            out[upper] = la + log1mexp(lb - la)
        if np.any(mid):
            # Phi(a) < 1/2 and Phi(-b) < 1/2, so the complement is well conditioned
            out[mid] = np.log1p(-(np.exp(log_ndtr(a[mid])) + np.exp(log_ndtr(-b[mid]))))
    out[a == b] = -np.inf
    return out


# -- link --------------------------------------------------------------------

def g(x, params: RiskDistributionParams):
    """Posterior class probability ``Pr(Y=1 | X=x)``; strictly increasing in x."""
    x = np.asarray(x, dtype=float)
    d = params.delta
    # 1 / (1 + (1-phi)/phi * exp(-d x + d^2/2)) written as a logistic
    arg = params.logit_phi + d * x - 0.5 * d * d
    out = 0.5 * (1.0 + np.tanh(0.5 * arg))
    return out if out.ndim else float(out)


def g_inverse(t, params: RiskDistributionParams):
    """Unique ``x`` with ``g(x) = t``; ``t`` must lie strictly inside (0, 1)."""
    t = np.asarray(t, dtype=float)
    if np.any((t <= 0.0) | (t >= 1.0)) or np.any(np.isnan(t)):
        raise ValueError("g_inverse is defined only for t in the open interval (0, 1)")
    d = params.delta
    out = 0.5 * d + (logit(t) - params.logit_phi) / d
    return out if out.ndim else float(out)


def _z(t, params: RiskDistributionParams):
    """g_inverse extended to the closed interval: -inf at 0, +inf at 1."""
    t = np.asarray(t, dtype=float)
    if np.any((t < 0.0) | (t > 1.0)) or np.any(np.isnan(t)):
        raise ValueError("probability thresholds must lie in [0, 1]")
    tc = np.clip(t, T_CLAMP, 1.0 - T_CLAMP)
    z = 0.5 * params.delta + (logit(tc) - params.logit_phi) / params.delta
    z = np.where(t <= 0.0, -np.inf, z)
    return np.where(t >= 1.0, np.inf, z)


def log_class_masses(t_lo, t_hi, params: RiskDistributionParams):
    """Log masses of ``t_lo <= p < t_hi`` within each latent class.

    Returns ``(log_a, log_b)`` with ``a = Pr(interval | Y=0)`` and
    ``b = Pr(interval | Y=1)``.
    """
    z_lo = _z(t_lo, params)
    z_hi = _z(t_hi, params)
    if np.any(z_lo > z_hi):
        raise ValueError("interval requires t_lo <= t_hi")
    d = params.delta
    return log_ndtr_diff(z_lo, z_hi), log_ndtr_diff(z_lo - d, z_hi - d)


def log_interval_prob(t_lo, t_hi, params: RiskDistributionParams):
    log_a, log_b = log_class_masses(t_lo, t_hi, params)
    return np.logaddexp(np.log1p(-params.phi) + log_a, np.log(params.phi) + log_b)


def interval_prob(t_lo, t_hi, params: RiskDistributionParams):
    """``Pr(t_lo <= p < t_hi)``."""
    out = np.exp(log_interval_prob(t_lo, t_hi, params))
    out = np.clip(out, 0.0, 1.0)
    return out if out.ndim else float(out)


def tail_prob(t, params: RiskDistributionParams):
    """``Pr(p > t)``; 1 at t=0, 0 at t=1, weakly decreasing."""
    return interval_prob(t, np.ones_like(np.asarray(t, dtype=float)), params)


def cond_mean_interval(t_lo, t_hi, params: RiskDistributionParams):
    """``E[Y | t_lo <= p < t_hi]``.

    Raises ConditioningError when the interval carries no probability mass.
    """
    log_a, log_b = log_class_masses(t_lo, t_hi, params)
    if np.any(np.isneginf(log_a) & np.isneginf(log_b)):
        raise ConditioningError("conditioning interval has vanishing probability")
    with np.errstate(invalid="ignore"):
        # phi * b / ((1 - phi) * a + phi * b) as a logistic in the log-odds
        log_odds = (np.log(params.phi) + log_b) - (np.log1p(-params.phi) + log_a)
    out = 0.5 * (1.0 + np.tanh(0.5 * log_odds))
    out = np.where(np.isneginf(log_a), 1.0, out)
    out = np.where(np.isneginf(log_b), 0.0, out)
    return out if out.ndim else float(out)


def cond_mean_above(t, params: RiskDistributionParams):
    """``E[Y | p > t]``, lies in [phi, 1] and is weakly increasing in t."""
    return cond_mean_interval(t, np.ones_like(np.asarray(t, dtype=float)), params)


def mc_oracle(params: RiskDistributionParams, n: int, seed: int):
    """Draw ``n`` iid ``(p, y)`` pairs from the generative story.

    Slow-path sampler used only to check the closed forms.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    y = (rng.random(n) < params.phi).astype(np.int8)
    x = rng.standard_normal(n) + params.delta * y
    # plain-form link, deliberately independent of g() above
    ratio = (1.0 - params.phi) / params.phi
    with np.errstate(over="ignore"):
        p = 1.0 / (1.0 + ratio * np.exp(-params.delta * x + params.delta**2 / 2.0))
    return p, y
