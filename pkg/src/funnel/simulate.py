"""Synthetic funnel data with known ground truth."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import expit

from .model import (
    DISCHARGE,
    FunnelConfig,
    ModelParams,
    PatientRecord,
    pathway_label,
    possible_pathways,
)
from .riskdist import DELTA_MIN

BLOCK_SIZE = 4096


def default_config() -> FunnelConfig:
    """Three stages with the outcome revealed from stage 2; stages 1 and 2 each add three features."""
    return FunnelConfig.staged([3, 3, 0], observation_stage=2)


@dataclass
class SimulationSpec:
    n_patients: int = 20000
    config: FunnelConfig = field(default_factory=default_config)
    min_per_pathway: int = 10
    seed: int = 0
    allow_skips: bool = True

    def __post_init__(self):
        if self.n_patients < 1:
            raise ValueError("n_patients must be positive")
        if self.min_per_pathway < 0:
            raise ValueError("min_per_pathway must be >= 0")

    @property
    def n_features(self) -> int:
        return self.config.n_features


@dataclass
class SimulatedData:
    records: list[PatientRecord]
    full_features: np.ndarray  # (n, d), nothing censored
    full_outcomes: np.ndarray  # (n,), including censored patients
    pathways: list[tuple[int, ...]]

    @property
    def observed(self) -> np.ndarray:
        return np.array([r.outcome is not None for r in self.records])

    @property
    def deepest(self) -> np.ndarray:
        return np.array([_deepest(p) for p in self.pathways])


def _deepest(pathway) -> int:
    stage = 1
    for code in pathway:
        if code == DISCHARGE:
            break
        stage = code
    return stage


def sample_ground_truth(spec: SimulationSpec, seed: Optional[int] = None) -> ModelParams:
    """Draw parameters the way the synthetic benchmark does.

    alpha, beta iid N(0, 1); t_1 ~ U(0, 0.5); each later threshold adds
    U(0, 0.5) and is kept below 1; deltas ~ HalfNormal(0.5) floored at DELTA_MIN.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    K = spec.config.n_stages
    d = spec.n_features
    alpha = rng.standard_normal()
    beta = rng.standard_normal(d)
    t = np.empty(K - 1)
    t[0] = rng.uniform(0.0, 0.5)
    for k in range(1, K - 1):
        t[k] = t[k - 1] + rng.uniform(0.0, 0.5)
    cap = 1.0 - 1e-6 * np.arange(K - 1, 0, -1)
    t = np.minimum(t, cap)
    # guard the (measure-zero) zero draw so t_1 stays positive
    t[0] = max(t[0], 1e-12)
    deltas = np.maximum(np.abs(rng.normal(0.0, 0.5, K - 1)), DELTA_MIN)
    return ModelParams(alpha, beta, t, deltas)


def _simulate_block(truth: ModelParams, config: FunnelConfig, n: int, rng: np.random.Generator, allow_skips: bool):
    K = config.n_stages
    d = config.n_features
    X = rng.standard_normal((n, d))
    # every random number is drawn up front so outputs do not depend on paths
    cls_u = rng.random((K - 1, n))
    noise = rng.standard_normal((K - 1, n))
    y_u = rng.random(n)

    tp = truth.padded_thresholds
    stage = np.ones(n, dtype=int)
    active = np.ones(n, dtype=bool)
    p_last = np.zeros(n)
    decisions = np.full((n, K - 1), -1, dtype=int)
    for s in range(1, K):
        here = active & (stage == s)
        if not np.any(here):
            continue
        mask = config.stage_feature_masks[s - 1]
        eta = truth.alpha + X[:, mask] @ truth.beta[mask]
        phi = expit(eta)
        delta = truth.deltas[s - 1]
        latent = (cls_u[s - 1] < phi).astype(float)
        x = noise[s - 1] + delta * latent
        p = expit(eta + delta * x - 0.5 * delta * delta)
        p_last[here] = p[here]
        # bucket m such that tp[m-1] <= p < tp[m]; thresholds t_s..t_{K-1} matter here
        bucket = np.searchsorted(tp, p, side="right")
        code = np.where(p < tp[s], DISCHARGE, np.maximum(bucket, s + 1))
        code = np.minimum(code, K)
        if not allow_skips:
            code = np.where(code > s + 1, s + 1, code)
        decisions[here, s - 1] = code[here]
        done = here & ((code == DISCHARGE) | (code == K))
        moving = here & ~done
        stage[moving] = code[moving]
        active[done] = False
    y = (y_u < p_last).astype(int)
    return X, decisions, y


def simulate_dataset(truth: ModelParams, spec: SimulationSpec) -> SimulatedData:
    """Generate patients with their funnel paths, then censor the outcomes."""
    config = spec.config
    n = spec.n_patients
    children = np.random.SeedSequence([spec.seed, 0x5EED]).spawn((n + BLOCK_SIZE - 1) // BLOCK_SIZE)
    Xs, Ds, ys = [], [], []
    for b, ss in enumerate(children):
        size = min(BLOCK_SIZE, n - b * BLOCK_SIZE)
        X, D, y = _simulate_block(truth, config, size, np.random.default_rng(ss), spec.allow_skips)
        Xs.append(X)
        Ds.append(D)
        ys.append(y)
    X = np.vstack(Xs)
    D = np.vstack(Ds)
    y = np.concatenate(ys)

    first_stage = config.first_stage_of_feature
    records = []
    pathways = []
    for i in range(n):
        path = tuple(int(c) for c in D[i] if c >= 0)
        deepest = _deepest(path)
        feats = X[i].copy()
        feats[first_stage > deepest] = np.nan
        outcome = int(y[i]) if deepest >= config.observation_stage else None
        records.append(PatientRecord(feats, path, outcome, visit_id=str(i)))
        pathways.append(path)
    return SimulatedData(records, X, y, pathways)


def pathway_counts(pathways, n_stages: int) -> dict[str, int]:
    counts = Counter(tuple(p) for p in pathways)
    return {pathway_label(p, n_stages): counts.get(p, 0) for p in possible_pathways(n_stages)}


def validate_simulation(data: SimulatedData, spec: SimulationSpec) -> tuple[bool, dict[str, int]]:
    """Accept iff every possible pathway has at least ``min_per_pathway`` patients."""
    counts = pathway_counts(data.pathways, spec.config.n_stages)
    return all(c >= spec.min_per_pathway for c in counts.values()), counts


def simulate_accepted(spec: SimulationSpec, max_tries: int = 100):
    """Resample ground truth until the simulated dataset passes validation.

    Returns ``(truth, data, counts, attempt)``; raises RuntimeError after
    ``max_tries`` rejected draws.
    """
    root = np.random.SeedSequence(spec.seed)
    last = None
    for attempt, child in enumerate(root.spawn(max_tries)):
        sub_seed = int(child.generate_state(1)[0])
        truth = sample_ground_truth(spec, sub_seed)
        data = simulate_dataset(truth, _with_seed(spec, sub_seed))
        ok, counts = validate_simulation(data, spec)
        if ok:
            return truth, data, counts, attempt
        last = counts
    raise RuntimeError(f"no valid simulation after {max_tries} attempts; last counts {last}")


def _with_seed(spec: SimulationSpec, seed: int) -> SimulationSpec:
    return SimulationSpec(spec.n_patients, spec.config, spec.min_per_pathway, seed, spec.allow_skips)
