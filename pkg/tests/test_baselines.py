import warnings

import numpy as np
import pytest
from scipy.special import expit

from funnel.baselines import (
    BaselineSpec,
    EmptyTrainingView,
    LogisticFit,
    build_training_view,
    fit_baseline,
    fit_logistic,
    predict_proba,
)
from funnel.model import ModelParams, PatientRecord, stage_mean
from funnel.simulate import validate_simulation


def test_spec_validation():
    with pytest.raises(ValueError):
        BaselineSpec(variant="forest")
    with pytest.raises(ValueError):
        BaselineSpec(l2=-1.0)


def test_training_views(small_sim):
    spec, _, data = small_sim
    config = spec.config
    X, y, cols = build_training_view(data.records, data.full_features, "imputed_zero", config)
    assert X.shape == (spec.n_patients, 6) and y.size == spec.n_patients
    n_obs = int(data.observed.sum())
    assert y.sum() == data.full_outcomes[data.observed].sum()

    X, y, _ = build_training_view(data.records, data.full_features, "target_y_observed", config)
    assert y.size == n_obs

    _, y, _ = build_training_view(data.records, data.full_features, "target_stage_decision", config)
    _, counts = validate_simulation(data, spec)
    assert y.sum() == counts["1->3"] + counts["1->2->3"]

    # without the full matrix only columns seen for every row survive
    X, _, cols = build_training_view(data.records, None, "imputed_zero", config)
    assert list(cols) == [0, 1, 2]
    X, _, cols = build_training_view(data.records, None, "target_y_observed", config)
    assert list(cols) == list(range(6))


def test_fully_censored_view_is_an_error(config):
    records = [PatientRecord(np.r_[np.zeros(3), np.full(3, np.nan)], (0,), None) for _ in range(5)]
    with pytest.raises(EmptyTrainingView):
        build_training_view(records, None, "target_y_observed", config)
    X, y, _ = build_training_view(records, None, "imputed_zero", config)
    assert y.size == 5 and not y.any()


def test_balanced_intercept_only():
    y = np.array([0.0, 1.0] * 50)
    fit = fit_logistic(np.empty((100, 0)), y, BaselineSpec(l2=0.0))
    assert fit.converged
    assert abs(fit.alpha) < 1e-12


def test_unpenalised_recovery_within_three_se():
    rng = np.random.default_rng(0)
    n = 100_000
    alpha, beta = -0.4, np.array([0.8, -0.5, 0.3])
    X = rng.normal(size=(n, 3))
    y = (rng.random(n) < expit(alpha + X @ beta)).astype(float)
    fit = fit_logistic(X, y, BaselineSpec(l2=0.0))
    w = np.r_[fit.alpha, fit.beta]
    X1 = np.column_stack([np.ones(n), X])
    mu = expit(X1 @ w)
    se = np.sqrt(np.diag(np.linalg.inv(X1.T @ (X1 * (mu * (1 - mu))[:, None]))))
    assert np.all(np.abs(w - np.r_[alpha, beta]) < 3 * se)


def test_matches_scipy_optimum():
    from scipy.optimize import minimize

    rng = np.random.default_rng(1)
    X = rng.normal(size=(300, 4))
    y = (rng.random(300) < expit(0.3 + X @ [1.0, -1.0, 0.5, 0.0])).astype(float)
    X1 = np.column_stack([np.ones(300), X])

    def nll(w):
        eta = X1 @ w
        return -(y @ eta - np.logaddexp(0, eta).sum()) + 0.5 * 2.0 * w[1:] @ w[1:]

    ref = minimize(nll, np.zeros(5), method="BFGS", options={"gtol": 1e-10}).x
    fit = fit_logistic(X, y, BaselineSpec(l2=2.0))
    assert np.allclose(np.r_[fit.alpha, fit.beta], ref, atol=1e-5)


def test_ridge_limit_shrinks_to_zero():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(500, 3))
    y = (rng.random(500) < expit(X @ [2.0, -2.0, 1.0])).astype(float)
    fit = fit_logistic(X, y, BaselineSpec(l2=1e9))
    assert np.max(np.abs(fit.beta)) < 1e-5


def test_loglik_path_non_decreasing():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(400, 5)) * 3
    y = (rng.random(400) < expit(X @ rng.normal(size=5))).astype(float)
    fit = fit_logistic(X, y, BaselineSpec(l2=0.1))
    assert np.all(np.diff(fit.loglik_path) >= -1e-9)


def test_separable_unpenalised_is_flagged():
    X = np.r_[np.linspace(-2, -0.1, 20), np.linspace(0.1, 2, 20)][:, None]
    y = (X[:, 0] > 0).astype(float)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        fit = fit_logistic(X, y, BaselineSpec(l2=0.0, max_iterations=25))
    assert not fit.converged
    assert np.isfinite(fit.alpha) and np.all(np.isfinite(fit.beta))
    penalised = fit_logistic(X, y, BaselineSpec(l2=1.0))
    assert penalised.converged


def test_predict_proba_properties(config):
    zero = LogisticFit(0.0, np.zeros(6), True, 0)
    assert np.all(predict_proba(zero, np.random.default_rng(0).normal(size=(7, 6))) == 0.5)
    fit = LogisticFit(0.2, np.array([0.5, -1.0, 0.3, 0.0, 0.0, 0.0]), True, 0)
    x = np.array([0.1, 0.2, -0.3, 0.0, 0.0, 0.0])
    rec = PatientRecord(np.r_[x[:3], np.full(3, np.nan)], (0,), None)
    params = ModelParams(0.2, fit.beta, [0.2, 0.5], [1.0, 1.0])
    assert predict_proba(fit, x)[0] == pytest.approx(stage_mean(rec, 1, params, config), rel=1e-14)
    grid = np.zeros((50, 6))
    grid[:, 0] = np.linspace(-3, 3, 50)
    assert np.all(np.diff(predict_proba(fit, grid)) > 0)


def test_restricted_columns_map_back(small_sim):
    spec, _, data = small_sim
    fit = fit_baseline(data.records, None, spec.config, BaselineSpec("target_stage_decision"))
    assert list(fit.columns) == [0, 1, 2]
    full = fit.full_beta(6)
    assert np.array_equal(full[3:], np.zeros(3))
    p = predict_proba(fit, data.full_features[:10])
    assert np.allclose(p, expit(fit.alpha + data.full_features[:10, :3] @ fit.beta))
