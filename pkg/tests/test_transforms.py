import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funnel import transforms
from funnel.inference import log_jacobian, to_constrained, to_unconstrained
from funnel.model import ModelParams
from funnel.riskdist import DELTA_MIN

finite = st.floats(-6.0, 6.0)


def test_midpoint_raw_threshold():
    p = to_constrained(np.array([0.0, 0.0, 0.0, 0.0]), 1)
    assert p.thresholds[0] == 0.25


@settings(max_examples=100, deadline=None)
@given(st.lists(finite, min_size=8, max_size=8))
def test_round_trip_and_invariants(values):
    theta = np.array(values)
    p = to_constrained(theta, 3)  # 1 + 3 + 2 + 2
    assert 0.0 < p.thresholds[0] <= 0.5
    assert p.thresholds[1] > p.thresholds[0] and p.thresholds[1] < 1.0
    assert np.all(p.deltas >= DELTA_MIN)
    back = to_unconstrained(p)
    assert np.allclose(back, theta, atol=1e-9, rtol=1e-9)


def test_round_trip_tight_on_moderate_values():
    rng = np.random.default_rng(0)
    for _ in range(200):
        theta = rng.normal(0, 1.5, 9)  # d = 2, K = 4
        assert np.max(np.abs(to_unconstrained(to_constrained(theta, 2)) - theta)) < 1e-12


def _numeric_log_det(theta, d, h=1e-6):
    """log |det d(t, delta)/d(u, v)| from central differences of the full map."""
    _, _, u, v = transforms.split(theta, d)
    raw = np.concatenate([u, v])
    k = u.size

    def f(r):
        t, _ = transforms.thresholds_from_raw(r[:k])
        return np.concatenate([t, transforms.deltas_from_raw(r[k:])])

    J = np.empty((raw.size, raw.size))
    for j in range(raw.size):
        e = np.zeros(raw.size)
        e[j] = h
        J[:, j] = (f(raw + e) - f(raw - e)) / (2 * h)
    return np.linalg.slogdet(J)[1]


def test_log_jacobian_matches_numeric_determinant():
    rng = np.random.default_rng(1)
    for _ in range(50):
        d = int(rng.integers(0, 4))
        K = int(rng.integers(2, 5))
        theta = rng.normal(0, 1, 1 + d + 2 * (K - 1))
        assert log_jacobian(theta, d) == pytest.approx(_numeric_log_det(theta, d), abs=1e-6)


def test_threshold_jacobian_matches_finite_differences():
    rng = np.random.default_rng(2)
    u = rng.normal(size=4)
    J = transforms.threshold_jacobian(u)
    h = 1e-6
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        col = (transforms.thresholds_from_raw(u + e)[0] - transforms.thresholds_from_raw(u - e)[0]) / (2 * h)
        assert np.allclose(J[:, j], col, atol=1e-8)


def test_params_vector_round_trip():
    p = ModelParams(0.3, [1.0, -2.0], [0.1, 0.4, 0.9], [0.5, 1.0, 2.0])
    q = ModelParams.from_vector(p.to_vector(), 2)
    assert np.array_equal(q.to_vector(), p.to_vector())
