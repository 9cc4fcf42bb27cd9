"""Bijection between ModelParams and an unconstrained real vector.

Layout of the unconstrained vector: ``[alpha, beta..., u_t..., v_delta...]``.

* ``t_1 = 0.5 * sigmoid(u_1)``
* ``t_k = t_{k-1} + (1 - t_{k-1}) * sigmoid(u_k)`` for k >= 2
* ``delta_k = DELTA_MIN + exp(v_k)``
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logit

from .riskdist import DELTA_MIN


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def n_unconstrained(n_features: int, n_stages: int) -> int:
    return 1 + n_features + 2 * (n_stages - 1)


def split(theta: np.ndarray, n_features: int):
    theta = np.asarray(theta, dtype=float)
    n_dec = (theta.size - 1 - n_features) // 2
    alpha = theta[0]
    beta = theta[1 : 1 + n_features]
    u = theta[1 + n_features : 1 + n_features + n_dec]
    v = theta[1 + n_features + n_dec :]
    return alpha, beta, u, v


def thresholds_from_raw(u: np.ndarray):
    """Return ``(t, rem)`` where ``rem = 1 - t`` is carried multiplicatively."""
    s = expit(u)
    s_c = expit(-u)
    t = np.empty(u.size)
    rem = np.empty(u.size)
    t[0] = 0.5 * s[0]
    rem[0] = 1.0 - t[0]
    for k in range(1, u.size):
        t[k] = t[k - 1] + rem[k - 1] * s[k]
        rem[k] = rem[k - 1] * s_c[k]
    return t, rem


def thresholds_to_raw(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    u = np.empty(t.size)
    u[0] = logit(2.0 * t[0])
    for k in range(1, t.size):
        u[k] = logit((t[k] - t[k - 1]) / (1.0 - t[k - 1]))
    return u


def threshold_jacobian(u: np.ndarray) -> np.ndarray:
    """Lower-triangular matrix ``J[k, j] = d t_k / d u_j``."""
    s = expit(u)
    s_c = expit(-u)
    _, rem = thresholds_from_raw(u)
    n = u.size
    jac = np.zeros((n, n))
    jac[0, 0] = 0.5 * s[0] * s_c[0]
    for k in range(1, n):
        jac[k, :k] = jac[k - 1, :k] * s_c[k]
        jac[k, k] = rem[k - 1] * s[k] * s_c[k]
    return jac


def log_jacobian(theta: np.ndarray, n_features: int) -> float:
    _, _, u, v = split(theta, n_features)
    _, rem = thresholds_from_raw(u)
    out = np.log(0.5) + np.sum(_log_sigmoid(u) + _log_sigmoid(-u))
    out += np.sum(np.log(rem[:-1]))
    return float(out + np.sum(v))


def log_jacobian_grad_parts(u: np.ndarray, v: np.ndarray):
    """Pieces of the log-Jacobian gradient.

    Returns ``(direct_u, wrt_t, direct_v)``: the partial derivative with
    respect to ``u`` holding ``t`` fixed, the partial with respect to ``t``
    (from the ``log(1 - t_{k-1})`` factors) and the derivative in ``v``.
    """
    s = expit(u)
    direct_u = 1.0 - 2.0 * s
    _, rem = thresholds_from_raw(u)
    wrt_t = np.zeros(u.size)
    wrt_t[:-1] = -1.0 / rem[:-1]
    return direct_u, wrt_t, np.ones(v.size)


def deltas_from_raw(v: np.ndarray) -> np.ndarray:
    # huge raw values overflow to inf, which the posterior then rejects
    with np.errstate(over="ignore"):
        return DELTA_MIN + np.exp(v)


def deltas_to_raw(delta: np.ndarray) -> np.ndarray:
    # a draw sitting exactly on the floor maps to a large negative raw value
    return np.log(np.maximum(np.asarray(delta, dtype=float) - DELTA_MIN, 1e-300))
