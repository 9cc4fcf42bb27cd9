"""Funnel generative model and its log-likelihood.

Stages are numbered ``1..K``.  A decision made at stage ``k`` is coded as
``0`` (discharge) or the target stage ``m > k``.  The thresholds vector
``t_1 < ... < t_{K-1}`` is padded to ``[0, t_1, ..., t_{K-1}, 1]`` so every
decision maps to a pair of indices into the padded vector:

* discharge at stage ``k``  ->  ``[0, t_k)``
* admit to stage ``m``      ->  ``[t_{m-1}, t_m)``   (``t_K`` read as 1)

Two routes evaluate the likelihood.  The per-record functions
(``stage_mean``, ``decision_probs``, ``pathway_loglik``) go through
``riskdist`` one patient at a time.  ``FunnelData`` flattens a dataset into
decision events and ``log_likelihood`` / ``grad_log_posterior`` work on
those arrays; this is what inference uses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from . import _kernels, transforms
from .riskdist import (
    DELTA_MIN,
    T_CLAMP,
    ConditioningError,
    RiskDistributionParams,
    cond_mean_interval,
    log_interval_prob,
    log_ndtr_diff,
    log_normal_pdf,
)

DISCHARGE = 0


class DataError(ValueError):
    """Raised for records that are inconsistent with the funnel config."""


@dataclass(frozen=True)
class PriorSpec:
    alpha_mean: float = 0.0
    alpha_sd: float = 1.0
    beta_sd: float = 1.0
    threshold_scale: float = 0.5
    delta_scale: float = 0.5

    def __post_init__(self):
        for name in ("alpha_sd", "beta_sd", "threshold_scale", "delta_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def mimic(cls) -> "PriorSpec":
        """Intercept prior centred on a ~1% base rate."""
        return cls(alpha_mean=-5.0)


@dataclass
class FunnelConfig:
    n_stages: int
    observation_stage: int
    stage_feature_masks: np.ndarray  # (K, n_features) bool
    share_coefficients: bool = True
    priors: PriorSpec = field(default_factory=PriorSpec)
    feature_names: Optional[list[str]] = None

    def __post_init__(self):
        self.stage_feature_masks = np.asarray(self.stage_feature_masks, dtype=bool)
        K = self.n_stages
        if K < 2:
            raise ValueError("a funnel needs at least two stages")
        if not 2 <= self.observation_stage <= K:
            raise ValueError("observation_stage must lie in [2, n_stages]")
        if self.stage_feature_masks.ndim != 2 or self.stage_feature_masks.shape[0] != K:
            raise ValueError("stage_feature_masks must have one row per stage")
        m = self.stage_feature_masks
        if np.any(m[:-1] & ~m[1:]):
            raise ValueError("stage feature masks must be nested")
        if not self.share_coefficients:
            raise NotImplementedError("per-stage coefficients are not supported")
        if self.feature_names is None:
            self.feature_names = [f"x{j + 1}" for j in range(self.n_features)]
        if len(self.feature_names) != self.n_features:
            raise ValueError("feature_names length does not match masks")

    @property
    def n_features(self) -> int:
        return self.stage_feature_masks.shape[1]

    @property
    def first_stage_of_feature(self) -> np.ndarray:
        """1-based stage at which each feature becomes visible."""
        return np.argmax(self.stage_feature_masks, axis=0) + 1

    @classmethod
    def staged(cls, features_per_stage: Sequence[int], observation_stage: int = 2, **kw) -> "FunnelConfig":
        """Config where ``features_per_stage[k]`` new features appear at stage k+1."""
        K = len(features_per_stage)
        d = int(sum(features_per_stage))
        masks = np.zeros((K, d), dtype=bool)
        upto = np.cumsum(features_per_stage)
        for k in range(K):
            masks[k, : upto[k]] = True
        return cls(K, observation_stage, masks, **kw)


@dataclass
class ModelParams:
    alpha: float
    beta: np.ndarray
    thresholds: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        self.alpha = float(self.alpha)
        self.beta = np.asarray(self.beta, dtype=float).copy()
        self.thresholds = np.atleast_1d(np.asarray(self.thresholds, dtype=float)).copy()
        self.deltas = np.atleast_1d(np.asarray(self.deltas, dtype=float)).copy()

    def validate(self, config: Optional[FunnelConfig] = None) -> "ModelParams":
        t = self.thresholds
        if config is not None:
            if t.size != config.n_stages - 1 or self.deltas.size != config.n_stages - 1:
                raise ValueError("need one threshold and one delta per decision stage")
            if self.beta.size != config.n_features:
                raise ValueError("beta length must equal the feature count")
        if not (0.0 < t[0] <= 0.5):
            raise ValueError("t_1 must lie in (0, 0.5]")
        if np.any(np.diff(t) <= 0) or t[-1] >= 1.0:
            raise ValueError("thresholds must be strictly increasing and below 1")
        if np.any(self.deltas < DELTA_MIN) or not np.all(np.isfinite(self.deltas)):
            raise ValueError(f"deltas must be finite and >= {DELTA_MIN}")
        return self

    @property
    def padded_thresholds(self) -> np.ndarray:
        return np.concatenate([[0.0], self.thresholds, [1.0]])

    def names(self) -> list[str]:
        return parameter_names(self.beta.size, self.thresholds.size + 1)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta, self.thresholds, self.deltas])

    @classmethod
    def from_vector(cls, vec, n_features: int) -> "ModelParams":
        vec = np.asarray(vec, dtype=float)
        n_dec = (vec.size - 1 - n_features) // 2
        return cls(vec[0], vec[1 : 1 + n_features], vec[1 + n_features : 1 + n_features + n_dec],
                   vec[1 + n_features + n_dec :])

    def to_unconstrained(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta, transforms.thresholds_to_raw(self.thresholds),
                               transforms.deltas_to_raw(self.deltas)])

    @classmethod
    def from_unconstrained(cls, theta, n_features: int) -> "ModelParams":
        alpha, beta, u, v = transforms.split(theta, n_features)
        t, _ = transforms.thresholds_from_raw(u)
        return cls(alpha, beta, t, transforms.deltas_from_raw(v))


def parameter_names(n_features: int, n_stages: int) -> list[str]:
    names = ["alpha"] + [f"beta_{j + 1}" for j in range(n_features)]
    names += [f"t_{k + 1}" for k in range(n_stages - 1)]
    names += [f"delta_{k + 1}" for k in range(n_stages - 1)]
    return names


@dataclass
class PatientRecord:
    """One patient visit.

    ``features`` is the global feature vector with NaN for entries that were
    never collected.  ``decisions[i]`` is the decision made at the i-th
    visited stage.
    """

    features: np.ndarray
    decisions: tuple[int, ...]
    outcome: Optional[int] = None
    visit_id: Optional[str] = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.decisions = tuple(int(d) for d in self.decisions)
        if self.outcome is not None:
            self.outcome = int(self.outcome)

    def visited_stages(self, n_stages: int) -> list[int]:
        """Stages visited, in order; the last entry is the deepest stage."""
        stages = [1]
        for code in self.decisions:
            if code == DISCHARGE:
                break
            stages.append(code)
        return stages

    def deepest_stage(self, n_stages: int) -> int:
        return self.visited_stages(n_stages)[-1]

    def validate(self, config: FunnelConfig) -> "PatientRecord":
        K = config.n_stages
        if self.features.shape != (config.n_features,):
            raise DataError(f"record {self.visit_id}: expected {config.n_features} features")
        stage = 1
        for i, code in enumerate(self.decisions):
            if stage == K:
                raise DataError(f"record {self.visit_id}: decision recorded after reaching stage {K}")
            if code != DISCHARGE and not stage < code <= K:
                raise DataError(f"record {self.visit_id}: invalid decision {code} at stage {stage}")
            if code == DISCHARGE:
                if i != len(self.decisions) - 1:
                    raise DataError(f"record {self.visit_id}: decisions continue after discharge")
                break
            stage = code
        else:
            if stage != K:
                raise DataError(f"record {self.visit_id}: decision sequence ends before a terminal disposition")
        deepest = self.deepest_stage(K)
        observed = deepest >= config.observation_stage
        if observed and self.outcome is None:
            raise DataError(f"record {self.visit_id}: outcome missing although stage {deepest} was reached")
        if not observed and self.outcome is not None:
            raise DataError(f"record {self.visit_id}: outcome present for a censored patient")
        if self.outcome is not None and self.outcome not in (0, 1):
            raise DataError(f"record {self.visit_id}: outcome must be 0 or 1")
        return self


def decision_interval(stage: int, code: int) -> tuple[int, int]:
    """Indices into the padded thresholds for a decision at ``stage``."""
    if code == DISCHARGE:
        return 0, stage
    return code - 1, code


def possible_pathways(n_stages: int) -> list[tuple[int, ...]]:
    """Every terminal decision sequence of a K-stage funnel."""
    out = []

    def walk(stage, prefix):
        out.append(prefix + (DISCHARGE,))
        for m in range(stage + 1, n_stages + 1):
            if m == n_stages:
                out.append(prefix + (m,))
            else:
                walk(m, prefix + (m,))

    walk(1, ())
    return out


def pathway_label(pathway: Sequence[int], n_stages: int) -> str:
    stages = [1]
    for code in pathway:
        if code == DISCHARGE:
            break
        stages.append(code)
    label = "->".join(str(s) for s in stages)
    return label + ("->discharge" if stages[-1] != n_stages else "")


# -- per-record route ----------------------------------------------------------

def stage_mean(record: PatientRecord, stage: int, params: ModelParams, config: FunnelConfig) -> float:
    """``sigmoid(alpha + sum_{j in mask_stage} beta_j x_j)``."""
    mask = config.stage_feature_masks[stage - 1]
    x = record.features[mask]
    if np.any(~np.isfinite(x)):
        j = np.flatnonzero(mask)[np.flatnonzero(~np.isfinite(x))[0]]
        raise DataError(f"feature {config.feature_names[j]!r} is required at stage {stage} but absent")
    return float(expit(params.alpha + x @ params.beta[mask]))


def _risk_params(record, stage, params, config) -> RiskDistributionParams:
    phi = stage_mean(record, stage, params, config)
    # keep phi inside (0, 1) for extreme linear predictors
    phi = min(max(phi, T_CLAMP), 1.0 - T_CLAMP)
    return RiskDistributionParams(phi, float(params.deltas[stage - 1]))


def decision_probs(record: PatientRecord, stage: int, params: ModelParams, config: FunnelConfig) -> np.ndarray:
    """Probabilities of ``[discharge, stage+1, ..., K]`` at ``stage``."""
    K = config.n_stages
    if not 1 <= stage < K:
        raise ValueError(f"no decision is made at stage {stage}")
    rp = _risk_params(record, stage, params, config)
    tp = params.padded_thresholds
    codes = [DISCHARGE] + list(range(stage + 1, K + 1))
    lo = np.array([tp[decision_interval(stage, c)[0]] for c in codes])
    hi = np.array([tp[decision_interval(stage, c)[1]] for c in codes])
    return np.exp(log_interval_prob(lo, hi, rp))


def _decision_stages(record: PatientRecord, K: int) -> list[tuple[int, int]]:
    stage = 1
    out = []
    for code in record.decisions:
        out.append((stage, code))
        if code == DISCHARGE:
            break
        stage = code
    return out


def pathway_loglik(record: PatientRecord, params: ModelParams, config: FunnelConfig) -> float:
    """Log-probability of the record's decisions and (if observed) outcome."""
    K = config.n_stages
    tp = params.padded_thresholds
    total = 0.0
    steps = _decision_stages(record, K)
    for stage, code in steps:
        lo, hi = decision_interval(stage, code)
        rp = _risk_params(record, stage, params, config)
        total += float(log_interval_prob(tp[lo], tp[hi], rp))
    if record.outcome is not None:
        stage, code = steps[-1]
        lo, hi = decision_interval(stage, code)
        rp = _risk_params(record, stage, params, config)
        try:
            q = cond_mean_interval(tp[lo], tp[hi], rp)
        except ConditioningError:
            return -np.inf
        with np.errstate(divide="ignore"):
            total += float(np.log(q) if record.outcome == 1 else np.log1p(-q))
    return total


def predict_rates(record: PatientRecord, params: ModelParams, config: FunnelConfig) -> dict:
    """Admit-rate vectors per visited decision stage and the terminal mortality rate."""
    K = config.n_stages
    steps = _decision_stages(record, K)
    rates = {}
    for stage, _ in steps:
        rates[stage] = decision_probs(record, stage, params, config)
    if steps:
        stage, code = steps[-1]
        lo, hi = decision_interval(stage, code)
        tp = params.padded_thresholds
        mortality = float(cond_mean_interval(tp[lo], tp[hi], _risk_params(record, stage, params, config)))
    else:
        deepest = 1
        for s in range(K, 0, -1):
            if np.all(np.isfinite(record.features[config.stage_feature_masks[s - 1]])):
                deepest = s
                break
        mortality = stage_mean(record, deepest, params, config)
    return {"admit_rates": rates, "mortality": mortality}


# -- vectorised route ----------------------------------------------------------

@dataclass
class FunnelData:
    """A dataset flattened into decision events.

    Each event is one decision by one patient.  ``y`` is attached to the
    patient's final event when the outcome was observed and is -1 otherwise.
    """

    n_patients: int
    n_features: int
    n_stages: int
    X: np.ndarray  # (m, d) design rows, masked-out entries zeroed
    patient: np.ndarray
    stage: np.ndarray  # 1-based decision stage
    lo: np.ndarray  # index into padded thresholds
    hi: np.ndarray
    y: np.ndarray
    final: np.ndarray

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord], config: FunnelConfig) -> "FunnelData":
        K = config.n_stages
        rows, pat, stg, lo, hi, ys, fin = [], [], [], [], [], [], []
        masks = config.stage_feature_masks
        for i, rec in enumerate(records):
            steps = _decision_stages(rec, K)
            for j, (stage, code) in enumerate(steps):
                mask = masks[stage - 1]
                x = rec.features[mask]
                if np.any(~np.isfinite(x)):
                    miss = np.flatnonzero(mask)[np.flatnonzero(~np.isfinite(x))[0]]
                    raise DataError(f"record {rec.visit_id if rec.visit_id is not None else i}: feature "
                                    f"{config.feature_names[miss]!r} required at stage {stage} is absent")
                row = np.zeros(config.n_features)
                row[mask] = x
                rows.append(row)
                pat.append(i)
                stg.append(stage)
                a, b = decision_interval(stage, code)
                lo.append(a)
                hi.append(b)
                last = j == len(steps) - 1
                fin.append(last)
                ys.append(rec.outcome if (last and rec.outcome is not None) else -1)
        X = np.array(rows).reshape(-1, config.n_features)
        return cls(len(records), config.n_features, K, X, np.array(pat, dtype=np.int64),
                   np.array(stg, dtype=np.int64), np.array(lo, dtype=np.int64), np.array(hi, dtype=np.int64),
                   np.array(ys, dtype=np.int8), np.array(fin, dtype=bool))

    @property
    def n_events(self) -> int:
        return self.patient.size


def _event_terms(eta, delta, lt_lo, lt_hi, lo_open, hi_open, y, grad=True):
    """Per-event log-likelihood and its partial derivatives.

    ``lt_*`` are logits of the interval endpoints; ``lo_open`` marks a lower
    endpoint of 0 and ``hi_open`` an upper endpoint of 1.  When ``y`` is 0
    or 1 the outcome term is folded in: the joint probability of the interval
    and ``y=1`` is ``phi * b`` and of ``y=0`` is ``(1 - phi) * a``.
    """
    inv_d = 1.0 / delta
    with np.errstate(invalid="ignore", over="ignore"):
        z_lo = np.where(lo_open, -np.inf, 0.5 * delta + (lt_lo - eta) * inv_d)
        z_hi = np.where(hi_open, np.inf, 0.5 * delta + (lt_hi - eta) * inv_d)
    log_a = log_ndtr_diff(z_lo, z_hi)
    log_b = log_ndtr_diff(z_lo - delta, z_hi - delta)
    log_phi = -np.logaddexp(0.0, -eta)
    log_1mphi = -np.logaddexp(0.0, eta)
    c0 = log_1mphi + log_a
    c1 = log_phi + log_b
    censored = y < 0
    logp = np.where(censored, np.logaddexp(c0, c1), np.where(y == 1, c1, c0))
    if not grad:
        return logp
    ok = np.isfinite(logp)
    with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
        w0 = np.where(censored, np.exp(c0 - logp), (y == 0).astype(float))
        w1 = np.where(censored, np.exp(c1 - logp), (y == 1).astype(float))
        w0 = np.where(ok, w0, 0.0)
        w1 = np.where(ok, w1, 0.0)
        use_a = w0 > 0
        use_b = w1 > 0
        ra_hi = np.where(use_a & ~hi_open, np.exp(log_normal_pdf(z_hi) - log_a), 0.0)
        ra_lo = np.where(use_a & ~lo_open, np.exp(log_normal_pdf(z_lo) - log_a), 0.0)
        rb_hi = np.where(use_b & ~hi_open, np.exp(log_normal_pdf(z_hi - delta) - log_b), 0.0)
        rb_lo = np.where(use_b & ~lo_open, np.exp(log_normal_pdf(z_lo - delta) - log_b), 0.0)
        g_hi = w0 * ra_hi + w1 * rb_hi
        g_lo = -(w0 * ra_lo + w1 * rb_lo)
        phi = np.exp(log_phi)
        d_eta = w1 - phi - (g_hi + g_lo) * inv_d
        d_lt_hi = g_hi * inv_d
        d_lt_lo = g_lo * inv_d
        dz_hi = np.where(hi_open, 0.0, 1.0 - z_hi * inv_d)
        dz_lo = np.where(lo_open, 0.0, 1.0 - z_lo * inv_d)
        d_delta = g_hi * dz_hi + g_lo * dz_lo - w1 * (rb_hi - rb_lo)
    return logp, d_eta, d_delta, d_lt_lo, d_lt_hi


def _event_inputs(data: FunnelData, params: ModelParams):
    tp = params.padded_thresholds
    lt = logit(np.clip(tp, T_CLAMP, 1.0 - T_CLAMP))
    eta = params.alpha + data.X @ params.beta
    delta = params.deltas[data.stage - 1]
    return eta, delta, lt[data.lo], lt[data.hi], data.lo == 0, data.hi == data.n_stages


def _terms(data: FunnelData, params: ModelParams, grad: bool, compiled: bool = True):
    eta, delta, lt_lo, lt_hi, lo_open, hi_open = _event_inputs(data, params)
    if compiled:
        out = _kernels.event_terms(eta, delta, lt_lo, lt_hi, lo_open, hi_open, data.y, grad)
        return out if grad else out[0]
    return _event_terms(eta, delta, lt_lo, lt_hi, lo_open, hi_open, data.y, grad=grad)


def event_logliks(data: FunnelData, params: ModelParams, compiled: bool = True) -> np.ndarray:
    return _terms(data, params, False, compiled)


def patient_logliks(data: FunnelData, params: ModelParams) -> np.ndarray:
    return np.bincount(data.patient, weights=event_logliks(data, params), minlength=data.n_patients)


def log_likelihood(data: FunnelData, params: ModelParams) -> float:
    if data.n_events == 0:
        return 0.0
    return float(np.sum(event_logliks(data, params)))


def log_likelihood_and_grad(data: FunnelData, params: ModelParams, compiled: bool = True):
    """Log-likelihood and its gradient in constrained coordinates.

    The gradient is returned as ``(d_alpha, d_beta, d_thresholds, d_deltas)``.
    """
    K = data.n_stages
    d = data.n_features
    if data.n_events == 0:
        return 0.0, 0.0, np.zeros(d), np.zeros(K - 1), np.zeros(K - 1)
    logp, d_eta, d_delta, d_lt_lo, d_lt_hi = _terms(data, params, True, compiled)
    total = float(np.sum(logp))
    g_alpha = float(np.sum(d_eta))
    g_beta = data.X.T @ d_eta
    g_delta = np.bincount(data.stage - 1, weights=d_delta, minlength=K - 1)
    g_lt = np.bincount(data.lo, weights=d_lt_lo, minlength=K + 1) + np.bincount(data.hi, weights=d_lt_hi, minlength=K + 1)
    t = params.thresholds
    g_t = g_lt[1:K] / (t * (1.0 - t))
    return total, g_alpha, g_beta, g_t, g_delta


def _half_normal_logpdf(x, scale):
    return np.log(2.0) - 0.5 * np.log(2.0 * np.pi) - np.log(scale) - 0.5 * (x / scale) ** 2


def _normal_logpdf(x, mean, sd):
    return -0.5 * np.log(2.0 * np.pi) - np.log(sd) - 0.5 * ((x - mean) / sd) ** 2


def log_prior(params: ModelParams, priors: PriorSpec) -> float:
    """Log prior density in constrained coordinates; -inf outside the support."""
    t = params.thresholds
    incr = np.diff(t)
    if not (0.0 < t[0] <= 0.5) or np.any(incr <= 0) or t[-1] >= 1.0 or np.any(params.deltas < DELTA_MIN):
        return -np.inf
    with np.errstate(over="ignore"):
        out = _normal_logpdf(params.alpha, priors.alpha_mean, priors.alpha_sd)
        out += np.sum(_normal_logpdf(params.beta, 0.0, priors.beta_sd))
        out += _half_normal_logpdf(t[0], priors.threshold_scale)
        out += np.sum(_half_normal_logpdf(incr, priors.threshold_scale))
        out += np.sum(_half_normal_logpdf(params.deltas, priors.delta_scale))
    return float(out)


def _log_prior_grad(params: ModelParams, priors: PriorSpec):
    t = params.thresholds
    s2 = priors.threshold_scale**2
    g_alpha = -(params.alpha - priors.alpha_mean) / priors.alpha_sd**2
    g_beta = -params.beta / priors.beta_sd**2
    g_t = np.zeros(t.size)
    g_t[0] -= t[0] / s2
    incr = np.diff(t)
    g_t[1:] -= incr / s2
    g_t[:-1] += incr / s2
    g_delta = -params.deltas / priors.delta_scale**2
    return g_alpha, g_beta, g_t, g_delta


def _as_data(dataset, config: FunnelConfig) -> FunnelData:
    if isinstance(dataset, FunnelData):
        return dataset
    return FunnelData.from_records(list(dataset), config)


def total_log_posterior(dataset, params: ModelParams, config: FunnelConfig) -> float:
    """Log-likelihood plus log prior, in constrained coordinates (no Jacobian)."""
    lp = log_prior(params, config.priors)
    if not np.isfinite(lp):
        return -np.inf
    return log_likelihood(_as_data(dataset, config), params) + lp


def log_posterior_unconstrained(theta: np.ndarray, data: FunnelData, config: FunnelConfig) -> float:
    params = ModelParams.from_unconstrained(theta, config.n_features)
    lp = log_prior(params, config.priors)
    if not np.isfinite(lp):
        return -np.inf
    return log_likelihood(data, params) + lp + transforms.log_jacobian(theta, config.n_features)


def grad_log_posterior(dataset, theta: np.ndarray, config: FunnelConfig):
    """Value and gradient of the log posterior in unconstrained coordinates.

    Includes the log-Jacobian of the constraint transform.  ``dataset`` may be
    a sequence of records or a prepared ``FunnelData``.
    """
    data = _as_data(dataset, config)
    d = config.n_features
    theta = np.asarray(theta, dtype=float)
    params = ModelParams.from_unconstrained(theta, d)
    lp = log_prior(params, config.priors)
    if not np.isfinite(lp):
        return -np.inf, np.full(theta.size, np.nan)
    ll, ga, gb, gt, gd = log_likelihood_and_grad(data, params)
    pa, pb, pt, pd = _log_prior_grad(params, config.priors)
    _, _, u, v = transforms.split(theta, d)
    ju, jt, jv = transforms.log_jacobian_grad_parts(u, v)
    g_t_total = gt + pt + jt
    g_u = transforms.threshold_jacobian(u).T @ g_t_total + ju
    g_v = (gd + pd) * np.exp(v) + jv
    value = ll + lp + transforms.log_jacobian(theta, d)
    grad = np.concatenate([[ga + pa], gb + pb, g_u, g_v])
    return value, grad


# -- vectorised predictions ----------------------------------------------------

def stage_linear_predictor(X: np.ndarray, stage: int, params: ModelParams, config: FunnelConfig) -> np.ndarray:
    mask = config.stage_feature_masks[stage - 1]
    Xm = np.where(mask, np.nan_to_num(X, nan=0.0), 0.0)
    need = X[:, mask]
    if np.any(~np.isfinite(need)):
        raise DataError(f"features required at stage {stage} are absent")
    return params.alpha + Xm @ params.beta


def _interval_masses(eta, delta, t_lo, t_hi):
    lt_lo = logit(np.clip(t_lo, T_CLAMP, 1.0 - T_CLAMP))
    lt_hi = logit(np.clip(t_hi, T_CLAMP, 1.0 - T_CLAMP))
    with np.errstate(invalid="ignore"):
        z_lo = np.where(t_lo <= 0.0, -np.inf, 0.5 * delta + (lt_lo - eta) / delta)
        z_hi = np.where(t_hi >= 1.0, np.inf, 0.5 * delta + (lt_hi - eta) / delta)
    return log_ndtr_diff(z_lo, z_hi), log_ndtr_diff(z_lo - delta, z_hi - delta)


def batch_decision_probs(X: np.ndarray, stage: int, params: ModelParams, config: FunnelConfig) -> np.ndarray:
    """(n, K - stage + 1) matrix of decision probabilities at ``stage``."""
    K = config.n_stages
    eta = stage_linear_predictor(X, stage, params, config)
    tp = params.padded_thresholds
    delta = params.deltas[stage - 1]
    codes = [DISCHARGE] + list(range(stage + 1, K + 1))
    cols = []
    for c in codes:
        a, b = decision_interval(stage, c)
        la, lb = _interval_masses(eta, delta, tp[a], tp[b])
        cols.append(np.exp(np.logaddexp(-np.logaddexp(0.0, eta) + la, -np.logaddexp(0.0, -eta) + lb)))
    return np.column_stack(cols)


def reach_probabilities(X: np.ndarray, params: ModelParams, config: FunnelConfig) -> np.ndarray:
    """(n, K) probability that each patient ever reaches each stage.

    Requires every feature for the stages being propagated through.
    """
    K = config.n_stages
    reach = np.zeros((X.shape[0], K))
    reach[:, 0] = 1.0
    for s in range(1, K):
        probs = batch_decision_probs(X, s, params, config)
        for j, m in enumerate(range(s + 1, K + 1)):
            reach[:, m - 1] += reach[:, s - 1] * probs[:, j + 1]
    # summed masses can overshoot 1 by an ulp
    return np.minimum(reach, 1.0)


def terminal_mortality(data: FunnelData, params: ModelParams) -> np.ndarray:
    """Per-patient ``E[Y | realised terminal interval]``."""
    f = data.final
    eta, delta, lt_lo, lt_hi, lo_open, hi_open = (a[f] for a in _event_inputs(data, params))
    with np.errstate(invalid="ignore", over="ignore"):
        z_lo = np.where(lo_open, -np.inf, 0.5 * delta + (lt_lo - eta) / delta)
        z_hi = np.where(hi_open, np.inf, 0.5 * delta + (lt_hi - eta) / delta)
    log_a = log_ndtr_diff(z_lo, z_hi)
    log_b = log_ndtr_diff(z_lo - delta, z_hi - delta)
    with np.errstate(invalid="ignore"):
        log_odds = (-np.logaddexp(0.0, -eta) + log_b) - (-np.logaddexp(0.0, eta) + log_a)
    q = expit(log_odds)
    q = np.where(np.isneginf(log_a) & np.isneginf(log_b), expit(eta), q)
    out = np.empty(data.n_patients)
    out[data.patient[f]] = q
    return out
