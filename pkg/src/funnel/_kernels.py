"""Compiled per-event likelihood kernel.

Same arithmetic as ``model._event_terms`` fused into one loop; the numpy
version stays as the reference it is tested against.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_SQRT1_2 = 0.7071067811865476
_LOG_SQRT_2PI = 0.9189385332046727
_LN2 = 0.6931471805599453


@njit(cache=True)
def log_ndtr(z):
    if z == math.inf:
        return 0.0
    if z == -math.inf:
        return -math.inf
    if z > 0.0:
        return math.log1p(-0.5 * math.erfc(z * _SQRT1_2))
    if z > -37.0:
        return math.log(0.5 * math.erfc(-z * _SQRT1_2))
    # asymptotic Mills-ratio series; relative error far below 1e-15 here
    iz2 = 1.0 / (z * z)
    s = 1.0 - iz2 * (1.0 - 3.0 * iz2 * (1.0 - 5.0 * iz2 * (1.0 - 7.0 * iz2 * (1.0 - 9.0 * iz2))))
    return -0.5 * z * z - math.log(-z) - _LOG_SQRT_2PI + math.log(s)


@njit(cache=True)
def _log1mexp(x):
    if x > -_LN2:
        return math.log(-math.expm1(x))
    return math.log1p(-math.exp(x))


@njit(cache=True)
def log_ndtr_diff(a, b):
    if a >= b:
        return -math.inf
    if b <= 0.0:
        lb = log_ndtr(b)
        return lb + _log1mexp(log_ndtr(a) - lb)
    if a >= 0.0:
        la = log_ndtr(-a)
        return la + _log1mexp(log_ndtr(-b) - la)
    return math.log1p(-(math.exp(log_ndtr(a)) + math.exp(log_ndtr(-b))))


@njit(cache=True)
def _log_pdf(z):
    return -0.5 * z * z - _LOG_SQRT_2PI


@njit(cache=True)
def _log_sigmoid(x):
    if x >= 0.0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


@njit(cache=True)
def event_terms(eta, delta, lt_lo, lt_hi, lo_open, hi_open, y, want_grad):
    n = eta.size
    logp = np.empty(n)
    d_eta = np.zeros(n)
    d_delta = np.zeros(n)
    d_lo = np.zeros(n)
    d_hi = np.zeros(n)
    for i in range(n):
        d = delta[i]
        e = eta[i]
        inv_d = 1.0 / d
        z_lo = -math.inf if lo_open[i] else 0.5 * d + (lt_lo[i] - e) * inv_d
        z_hi = math.inf if hi_open[i] else 0.5 * d + (lt_hi[i] - e) * inv_d
        log_a = log_ndtr_diff(z_lo, z_hi)
        log_b = log_ndtr_diff(z_lo - d, z_hi - d)
        log_phi = _log_sigmoid(e)
        log_1mphi = _log_sigmoid(-e)
        c0 = log_1mphi + log_a
        c1 = log_phi + log_b
        yi = y[i]
        if yi < 0:
            m = max(c0, c1)
            if m == -math.inf:
                lp = -math.inf
            else:
                lp = m + math.log(math.exp(c0 - m) + math.exp(c1 - m))
        elif yi == 1:
            lp = c1
        else:
            lp = c0
        logp[i] = lp
        if not want_grad or lp == -math.inf:
            continue
        if yi < 0:
            w0 = math.exp(c0 - lp)
            w1 = math.exp(c1 - lp)
        elif yi == 1:
            w0 = 0.0
            w1 = 1.0
        else:
            w0 = 1.0
            w1 = 0.0
        ra_hi = 0.0
        ra_lo = 0.0
        rb_hi = 0.0
        rb_lo = 0.0
        if w0 > 0.0:
            if not hi_open[i]:
                ra_hi = math.exp(_log_pdf(z_hi) - log_a)
            if not lo_open[i]:
                ra_lo = math.exp(_log_pdf(z_lo) - log_a)
        if w1 > 0.0:
            if not hi_open[i]:
                rb_hi = math.exp(_log_pdf(z_hi - d) - log_b)
            if not lo_open[i]:
                rb_lo = math.exp(_log_pdf(z_lo - d) - log_b)
        g_hi = w0 * ra_hi + w1 * rb_hi
        g_lo = -(w0 * ra_lo + w1 * rb_lo)
        phi = math.exp(log_phi)
        d_eta[i] = w1 - phi - (g_hi + g_lo) * inv_d
        d_hi[i] = g_hi * inv_d
        d_lo[i] = g_lo * inv_d
        dz_hi = 0.0 if hi_open[i] else 1.0 - z_hi * inv_d
        dz_lo = 0.0 if lo_open[i] else 1.0 - z_lo * inv_d
        d_delta[i] = g_hi * dz_hi + g_lo * dz_lo - w1 * (rb_hi - rb_lo)
    return logp, d_eta, d_delta, d_lo, d_hi
