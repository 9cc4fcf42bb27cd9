"""Censoring-naive logistic regression baselines."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from .model import FunnelConfig, PatientRecord

VARIANTS = ("target_y_observed", "target_stage_decision", "imputed_zero")


class EmptyTrainingView(ValueError):
    pass


@dataclass(frozen=True)
class BaselineSpec:
    variant: str = "target_y_observed"
    l2: float = 1.0
    max_iterations: int = 100
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown baseline variant {self.variant!r}")
        if self.l2 < 0:
            raise ValueError("l2 must be non-negative")


@dataclass
class LogisticFit:
    alpha: float
    beta: np.ndarray
    converged: bool
    n_iter: int
    loglik_path: list[float] = field(default_factory=list)
    columns: Optional[np.ndarray] = None  # global feature indices used

    def full_beta(self, n_features: int) -> np.ndarray:
        """Coefficients on the global feature vector; unused features get 0."""
        out = np.zeros(n_features)
        cols = np.arange(self.beta.size) if self.columns is None else self.columns
        out[cols] = self.beta
        return out


def build_training_view(records: Sequence[PatientRecord], full_features: Optional[np.ndarray], variant: str,
                        config: FunnelConfig):
    """Training rows for a baseline variant, with the global indices of the columns used.

    With ``full_features`` (simulation mode) every row sees every feature.
    Without it, only features observed for every selected row are used.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown baseline variant {variant!r}")
    K = config.n_stages
    observed = np.array([r.outcome is not None for r in records], dtype=bool)
    if variant == "target_y_observed":
        rows = np.flatnonzero(observed)
        target = np.array([records[i].outcome for i in rows], dtype=float)
    elif variant == "target_stage_decision":
        rows = np.arange(len(records))
        target = np.array([r.deepest_stage(K) == K for r in records], dtype=float)
    else:
        rows = np.arange(len(records))
        target = np.array([r.outcome if r.outcome is not None else 0 for r in records], dtype=float)
    if rows.size == 0:
        raise EmptyTrainingView(f"no rows available for baseline {variant!r}")
    if full_features is not None:
        X = np.asarray(full_features, dtype=float)[rows]
        cols = np.arange(X.shape[1])
    else:
        X = np.array([records[i].features for i in rows])
        cols = np.flatnonzero(np.all(np.isfinite(X), axis=0))
        X = X[:, cols]
    return X, target, cols


def _penalized_loglik(X1, y, w, l2):
    eta = X1 @ w
    ll = float(np.sum(y * eta - np.logaddexp(0.0, eta)))
    return ll - 0.5 * l2 * float(w[1:] @ w[1:])


def fit_logistic(design: np.ndarray, target: np.ndarray, spec: BaselineSpec = BaselineSpec(),
                 columns: Optional[np.ndarray] = None) -> LogisticFit:
    """L2-penalised logistic regression by IRLS with step halving.

    The intercept is not penalised.  Returns a result flagged
    ``converged=False`` instead of raising when the iteration cap is hit.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(target, dtype=float)
    n, d = X.shape
    X1 = np.column_stack([np.ones(n), X])
    pen = np.full(d + 1, spec.l2)
    pen[0] = 0.0
    w = np.zeros(d + 1)
    ll = _penalized_loglik(X1, y, w, spec.l2)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, spec.max_iterations + 1):
        mu = expit(X1 @ w)
        W = mu * (1.0 - mu)
        grad = X1.T @ (y - mu) - pen * w
        H = X1.T @ (X1 * W[:, None]) + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        scale = 1.0
        while True:
            cand = w + scale * step
            ll_c = _penalized_loglik(X1, y, cand, spec.l2)
            if ll_c >= ll - 1e-12 * abs(ll) or scale < 1e-10:
                break
            scale *= 0.5
        if ll_c < ll:
            # no ascent direction left at machine precision
            converged = np.max(np.abs(step)) < np.sqrt(spec.tolerance)
            break
        change = np.max(np.abs(cand - w))
        w, ll = cand, ll_c
        path.append(ll)
        if change < spec.tolerance:
            converged = True
            break
    if not converged:
        warnings.warn(f"IRLS did not converge in {spec.max_iterations} iterations", RuntimeWarning)
    return LogisticFit(float(w[0]), w[1:].copy(), converged, it, path, columns)


def predict_proba(fit: LogisticFit, X: np.ndarray) -> np.ndarray:
    """``sigmoid(alpha + X beta)`` on the global feature vector(s)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cols = np.arange(fit.beta.size) if fit.columns is None else fit.columns
    out = expit(fit.alpha + X[:, cols] @ fit.beta)
    return out


def fit_baseline(records, full_features, config: FunnelConfig, spec: BaselineSpec) -> LogisticFit:
    X, y, cols = build_training_view(records, full_features, spec.variant, config)
    return fit_logistic(X, y, spec, columns=cols)
