"""Evaluation metrics for fitted funnel models and their baselines."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.stats import norm, rankdata

from .model import (
    DISCHARGE,
    FunnelConfig,
    FunnelData,
    ModelParams,
    PatientRecord,
    batch_decision_probs,
    pathway_label,
    reach_probabilities,
    terminal_mortality,
)


class UndefinedMetric(ValueError):
    pass


def mae_params(estimated: Mapping[str, float], truth: Mapping[str, float], names: Sequence[str]) -> float:
    missing = [n for n in names if n not in estimated or n not in truth]
    if missing:
        raise KeyError(f"parameters missing from estimate or truth: {missing}")
    return float(np.mean([abs(estimated[n] - truth[n]) for n in names]))


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC with average ranks for ties."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise UndefinedMetric("AUROC needs both classes present")
    ranks = rankdata(s, method="average")
    return float((ranks[y].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def ece(scores, labels, n_bins: int = 10) -> float:
    """Expected calibration error over equal-width bins on [0, 1]."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    if np.any((s < 0) | (s > 1)):
        raise ValueError("scores must lie in [0, 1]")
    if s.size == 0:
        return 0.0
    idx = np.minimum((s * n_bins).astype(int), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    sum_s = np.bincount(idx, weights=s, minlength=n_bins)
    sum_y = np.bincount(idx, weights=y, minlength=n_bins)
    nz = counts > 0
    gap = np.abs(sum_s[nz] - sum_y[nz])  # n_b * |mean score - mean label|
    return float(gap.sum() / s.size)


def interval_coverage(lower, upper, truth, names: Optional[Sequence[str]] = None) -> dict[str, float]:
    """Fraction of simulations whose interval contains the truth, per parameter.

    Inputs have shape (n_simulations, n_params).
    """
    lo = np.atleast_2d(np.asarray(lower, dtype=float))
    hi = np.atleast_2d(np.asarray(upper, dtype=float))
    tr = np.atleast_2d(np.asarray(truth, dtype=float))
    hit = (lo <= tr) & (tr <= hi)
    frac = hit.mean(axis=0)
    names = names or [f"p{j}" for j in range(frac.size)]
    return {n: float(f) for n, f in zip(names, frac)}


# -- posterior predictive -------------------------------------------------------

def _feature_matrix(records: Sequence[PatientRecord]) -> np.ndarray:
    return np.array([r.features for r in records], dtype=float)


def posterior_predictive_rates(param_draws: Sequence[ModelParams], records: Sequence[PatientRecord],
                               config: FunnelConfig) -> list[dict]:
    """Observed vs model-expected admit and mortality rates.

    Admit rates are grouped by (decision stage, disposition) over patients who
    made a decision at that stage; mortality rates by terminal pathway over
    patients with an observed outcome.  Expected values average per-patient
    predictions over patients and over the supplied posterior draws.
    """
    K = config.n_stages
    X = _feature_matrix(records)
    data = FunnelData.from_records(records, config)
    draws = list(param_draws)
    if not draws or not records:
        raise ValueError("need posterior draws and records")
    rows = []

    decided = {s: [] for s in range(1, K)}
    chosen = {s: [] for s in range(1, K)}
    for i, rec in enumerate(records):
        stage = 1
        for code in rec.decisions:
            decided[stage].append(i)
            chosen[stage].append(code)
            if code == DISCHARGE:
                break
            stage = code
    for s in range(1, K):
        idx = np.array(decided[s], dtype=int)
        if idx.size == 0:
            continue
        codes = [DISCHARGE] + list(range(s + 1, K + 1))
        expected = np.zeros(len(codes))
        for p in draws:
            expected += batch_decision_probs(X[idx], s, p, config).mean(axis=0)
        expected /= len(draws)
        ch = np.array(chosen[s])
        for j, c in enumerate(codes):
            obs = float(np.mean(ch == c))
            rows.append(_rate_row("admit", f"stage {s} -> {'discharge' if c == DISCHARGE else c}",
                                  idx.size, obs, float(expected[j])))

    paths = [tuple(r.decisions) for r in records]
    obs_mask = np.array([r.outcome is not None for r in records])
    ys = np.array([r.outcome if r.outcome is not None else -1 for r in records])
    mort = np.zeros(len(records))
    for p in draws:
        mort += terminal_mortality(data, p)
    mort /= len(draws)
    for path in sorted(set(paths)):
        sel = np.array([q == path for q in paths]) & obs_mask
        if not np.any(sel):
            continue
        rows.append(_rate_row("mortality", pathway_label(path, K), int(sel.sum()), float(ys[sel].mean()),
                              float(mort[sel].mean())))
    return rows


def _rate_row(kind, group, n, observed, expected):
    se = float(np.sqrt(max(expected * (1.0 - expected), 1e-12) / n))
    return {"kind": kind, "group": group, "n": int(n), "observed": observed, "expected": expected,
            "se": se, "z": (observed - expected) / se}


# -- acuity regression ------------------------------------------------------------

def acuity_regression(acuity, male, female, risk, level: float = 0.95) -> dict[str, dict[str, float]]:
    """OLS of acuity on male/female indicators and model risk, no global intercept."""
    y = np.asarray(acuity, dtype=float)
    male = np.asarray(male, dtype=float)
    female = np.asarray(female, dtype=float)
    risk = np.asarray(risk, dtype=float)
    if np.any((male + female) != 1.0):
        raise ValueError("group indicators must partition the sample")
    X = np.column_stack([male, female, risk])
    n, k = X.shape
    if np.linalg.matrix_rank(X) < k:
        raise np.linalg.LinAlgError("acuity design matrix is rank deficient")
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = max(n - k, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(X.T @ X)
    se = np.sqrt(np.diag(cov))
    zq = norm.ppf(0.5 + level / 2.0)
    out = {}
    for name, b, s in zip(("beta_male", "beta_female", "beta_risk"), coef, se):
        out[name] = {"estimate": float(b), "se": float(s), "lower": float(b - zq * s), "upper": float(b + zq * s)}
    return out


# -- task scoring -----------------------------------------------------------------

def funnel_task_scores(param_draws: Sequence[ModelParams], records: Sequence[PatientRecord],
                       full_features: np.ndarray, config: FunnelConfig) -> dict[str, np.ndarray]:
    """Per-patient funnel predictions for the mortality and admission tasks.

    ``mortality`` is the expected outcome given the patient's realised
    terminal decision interval; ``admission`` is the probability of reaching
    the final stage, computed from the full feature vector.
    """
    data = FunnelData.from_records(records, config)
    draws = list(param_draws)
    mort = np.zeros(len(records))
    adm = np.zeros(len(records))
    for p in draws:
        mort += terminal_mortality(data, p)
        adm += reach_probabilities(full_features, p, config)[:, -1]
    return {"mortality": mort / len(draws), "admission": adm / len(draws)}


def task_labels(records: Sequence[PatientRecord], full_outcomes: Optional[np.ndarray], config: FunnelConfig):
    """Masks and labels for the three evaluation tasks."""
    K = config.n_stages
    observed = np.array([r.outcome is not None for r in records])
    final = np.array([r.deepest_stage(K) == K for r in records], dtype=int)
    tasks = {"admission": (np.ones(len(records), dtype=bool), final)}
    y_obs = np.array([r.outcome if r.outcome is not None else 0 for r in records])
    tasks["mortality_observed"] = (observed, y_obs)
    if full_outcomes is not None:
        tasks["mortality_censored"] = (~observed, np.asarray(full_outcomes, dtype=int))
    return tasks


def score_tasks(scores: Mapping[str, np.ndarray], tasks, n_bins: int = 10) -> dict[str, dict[str, float]]:
    """AUROC/ECE per task plus their unweighted average.

    ``scores`` maps ``"mortality"`` and ``"admission"`` to per-patient scores.
    """
    out = {}
    for task, (mask, labels) in tasks.items():
        s = scores["admission"] if task == "admission" else scores["mortality"]
        if not np.any(mask):
            continue
        try:
            a = auroc(s[mask], labels[mask])
        except UndefinedMetric:
            a = float("nan")
        out[task] = {"auroc": a, "ece": ece(s[mask], labels[mask], n_bins), "n": int(mask.sum())}
    out["average"] = {
        "auroc": float(np.nanmean([v["auroc"] for v in out.values()])),
        "ece": float(np.mean([v["ece"] for v in out.values()])),
        "n": int(sum(v["n"] for v in out.values())),
    }
    return out


@dataclass
class EvaluationReport:
    mae: dict = field(default_factory=dict)  # method -> {param group -> MAE}
    predictive: dict = field(default_factory=dict)  # method -> task -> {auroc, ece, n}
    coverage: dict = field(default_factory=dict)
    posterior_predictive: list = field(default_factory=list)
    acuity: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def validate(self) -> "EvaluationReport":
        for method, tasks in self.predictive.items():
            for task, m in tasks.items():
                for key in ("auroc", "ece"):
                    v = m[key]
                    if not (np.isnan(v) or 0.0 <= v <= 1.0):
                        raise ValueError(f"{method}/{task}: {key}={v} outside [0, 1]")
        for name, c in self.coverage.items():
            if not 0.0 <= c <= 1.0:
                raise ValueError(f"coverage for {name} outside [0, 1]")
        return self

    def to_json(self) -> str:
        return json.dumps(_clean(asdict(self)), indent=2, sort_keys=True, allow_nan=False)

    def table1_rows(self) -> list[dict]:
        rows = []
        for group in sorted({g for v in self.mae.values() for g in v}):
            for method, vals in self.mae.items():
                if group in vals:
                    rows.append({"method": method, "parameter": group, "mae": vals[group]})
        return rows

    def table2_rows(self) -> list[dict]:
        return [{"method": m, "task": t, "auroc": v["auroc"], "ece": v["ece"], "n": v["n"]}
                for m, tasks in self.predictive.items() for t, v in tasks.items()]


def _clean(o):
    """Convert numpy scalars and arrays to plain Python; NaN and inf become null."""
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple, np.ndarray)):
        return [_clean(v) for v in o]
    if isinstance(o, (np.integer, np.bool_)):
        return o.item()
    if isinstance(o, (float, np.floating)):
        v = float(o)
        return v if np.isfinite(v) else None
    return o
