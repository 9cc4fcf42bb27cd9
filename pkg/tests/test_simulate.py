import math
from collections import Counter

import numpy as np
import pytest

from funnel.dataio import write_dataset
from funnel.model import FunnelData, ModelParams, batch_decision_probs, log_likelihood, pathway_loglik
from funnel.simulate import (
    SimulationSpec,
    pathway_counts,
    sample_ground_truth,
    simulate_accepted,
    simulate_dataset,
    validate_simulation,
)


def _truth(t, deltas=(0.6, 0.8), seed=0):
    rng = np.random.default_rng(seed)
    return ModelParams(rng.normal(), rng.normal(size=6), list(t), list(deltas))


def test_spec_validation():
    with pytest.raises(ValueError):
        SimulationSpec(n_patients=0)
    with pytest.raises(ValueError):
        SimulationSpec(min_per_pathway=-1)
    assert SimulationSpec().n_features == 6


def test_ground_truth_is_seeded_and_ordered():
    spec = SimulationSpec()
    a = sample_ground_truth(spec, 4)
    b = sample_ground_truth(spec, 4)
    assert np.array_equal(a.to_vector(), b.to_vector())
    t1 = np.empty(10_000)
    for s in range(t1.size):
        p = sample_ground_truth(spec, s)
        assert p.thresholds[1] > p.thresholds[0]
        assert p.thresholds[1] < 1.0
        assert np.all(p.deltas >= 1e-4)
        t1[s] = p.thresholds[0]
    assert abs(t1.mean() - 0.25) < 3 * 0.5 / math.sqrt(12 * t1.size)


def test_everyone_discharged_when_first_threshold_is_high():
    spec = SimulationSpec(n_patients=2000, seed=1)
    data = simulate_dataset(_truth([1 - 2e-9, 1 - 1e-9], deltas=(0.3, 0.3)), spec)
    assert all(p == (0,) for p in data.pathways)
    assert not data.observed.any()
    ok, counts = validate_simulation(data, spec)
    assert not ok and counts["1->discharge"] == 2000


def test_tiny_thresholds_send_everyone_to_the_end():
    truth = _truth([1e-9, 2e-9])
    spec = SimulationSpec(n_patients=20_000, seed=2)
    data = simulate_dataset(truth, spec)
    assert data.observed.mean() > 0.999
    phi = 1 / (1 + np.exp(-(truth.alpha + data.full_features[:, :3] @ truth.beta[:3])))
    y = data.full_outcomes
    se = math.sqrt(y.var() / y.size)
    # skippers draw y from the stage-1 risk, whose mean is phi
    skip = np.array([p == (3,) for p in data.pathways])
    assert skip.mean() > 0.99
    assert abs(y[skip].mean() - phi[skip].mean()) < 3 * se


def test_pathway_frequencies_match_model_probabilities():
    truth = _truth([0.2, 0.45], deltas=(0.9, 1.2), seed=5)
    spec = SimulationSpec(n_patients=100_000, seed=9)
    data = simulate_dataset(truth, spec)
    X = data.full_features
    d1 = batch_decision_probs(X, 1, truth, spec.config)
    d2 = batch_decision_probs(X, 2, truth, spec.config)
    expected = {(0,): d1[:, 0], (3,): d1[:, 2], (2, 0): d1[:, 1] * d2[:, 0], (2, 3): d1[:, 1] * d2[:, 1]}
    counts = Counter(data.pathways)
    n = spec.n_patients
    for path, probs in expected.items():
        p = probs.mean()
        assert abs(counts[path] / n - p) < 3 * math.sqrt(p * (1 - p) / n), path


def test_censoring_follows_decisions(small_sim):
    spec, _, data = small_sim
    for rec, path in zip(data.records, data.pathways):
        assert tuple(rec.decisions) == path
        reached_two = path[0] != 0
        assert (rec.outcome is not None) == reached_two
        if rec.outcome is None:
            assert np.all(np.isnan(rec.features[3:]))
        else:
            assert np.all(np.isfinite(rec.features))
    assert np.array_equal(np.array([r.outcome for r in data.records if r.outcome is not None]),
                          data.full_outcomes[data.observed])


def test_validation_counts_match_recount(small_sim):
    spec, _, data = small_sim
    ok, counts = validate_simulation(data, spec)
    assert ok
    recount = Counter()
    for rec in data.records:
        stages = ["1"] + [str(c) for c in rec.decisions if c != 0]
        recount["->".join(stages) + ("" if stages[-1] == "3" else "->discharge")] += 1
    assert counts == dict(recount)
    assert sum(counts.values()) == spec.n_patients
    assert pathway_counts([], 3) == {k: 0 for k in counts}


def test_balanced_dataset_accepted():
    truth = _truth([0.2, 0.45], deltas=(0.9, 1.2), seed=5)
    spec = SimulationSpec(n_patients=5000, seed=1)
    ok, counts = validate_simulation(simulate_dataset(truth, spec), spec)
    assert ok and min(counts.values()) >= 10


def test_skips_can_be_disabled():
    truth = _truth([0.05, 0.1], deltas=(1.0, 1.0), seed=2)
    data = simulate_dataset(truth, SimulationSpec(n_patients=3000, seed=1, allow_skips=False))
    assert all(p[0] != 3 for p in data.pathways)


def test_seed_determinism_is_byte_identical(tmp_path):
    spec = SimulationSpec(n_patients=5000, seed=21)
    runs = []
    for name in ("a.csv", "b.csv"):
        truth, data, _, _ = simulate_accepted(spec)
        write_dataset(tmp_path / name, data.records, spec.config)
        runs.append((tmp_path / name).read_bytes())
    assert runs[0] == runs[1]
    other = SimulationSpec(n_patients=5000, seed=22)
    _, data, _, _ = simulate_accepted(other)
    write_dataset(tmp_path / "c.csv", data.records, other.config)
    assert (tmp_path / "c.csv").read_bytes() != runs[0]


def test_simulate_accepted_gives_up():
    spec = SimulationSpec(n_patients=20, min_per_pathway=50, seed=0)
    with pytest.raises(RuntimeError):
        simulate_accepted(spec, max_tries=3)


def test_true_parameters_beat_perturbations():
    spec = SimulationSpec(n_patients=50_000, seed=31)
    truth, data, _, _ = simulate_accepted(spec)
    fd = FunnelData.from_records(data.records, spec.config)
    base = log_likelihood(fd, truth) / spec.n_patients
    theta = truth.to_unconstrained()
    rng = np.random.default_rng(0)
    for _ in range(20):
        u = rng.normal(size=theta.size)
        u *= 0.5 / np.linalg.norm(u)
        for sign in (1, -1):
            other = ModelParams.from_unconstrained(theta + sign * u, spec.n_features)
            assert log_likelihood(fd, other) / spec.n_patients < base


def test_record_loglik_consistent_with_batch(small_sim):
    spec, truth, data = small_sim
    recs = data.records[:50]
    fd = FunnelData.from_records(recs, spec.config)
    assert sum(pathway_loglik(r, truth, spec.config) for r in recs) == pytest.approx(log_likelihood(fd, truth), rel=1e-10)
