from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.optimize import brentq
from scipy.special import expit, logit

from nmacausal.glm import (
    DesignMatrix,
    FluctuationError,
    SingularDesignError,
    fit_fluctuation,
    fit_lasso_logistic,
    fit_logistic,
    fit_weighted_linear,
    lasso_kkt,
    lasso_lambda_grid,
    logistic_gradient,
    logistic_objective,
    select_lasso_lambda,
)


def test_wls_matches_extended_precision_normal_equations(rng):
    X = np.column_stack([np.ones(50), rng.normal(size=(50, 3))])
    y = X @ [1.0, -2.0, 0.5, 3.0] + rng.normal(size=50)
    w = rng.uniform(0.1, 5.0, size=50)
    fit = fit_weighted_linear(X, y, w)
    Xl, yl, wl = (np.asarray(a, dtype=np.longdouble) for a in (X, y, w))
    H = (Xl * wl[:, None]).T @ Xl
    g = (Xl * wl[:, None]).T @ yl
    # Gaussian elimination in long double
    A = np.concatenate([H, g[:, None]], axis=1)
    p = A.shape[0]
    for i in range(p):
        A[i] /= A[i, i]
        for j in range(p):
            if j != i:
                A[j] -= A[j, i] * A[i]
    oracle = np.asarray(A[:, -1], dtype=float)
    np.testing.assert_allclose(fit.coef, oracle, atol=1e-8)


def test_wls_singular_names_columns():
    X = DesignMatrix(np.column_stack([np.ones(4), [1, 2, 3, 4], [2, 4, 6, 8]]), ("intercept", "a", "b"))
    with pytest.raises(SingularDesignError) as err:
        fit_weighted_linear(X, [1, 2, 3, 4])
    assert "a" in str(err.value) and "b" in str(err.value)


def test_wls_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_weighted_linear(np.ones((3, 1)), [1, 2, np.nan])
    with pytest.raises(ValueError):
        fit_weighted_linear(np.ones((3, 1)), [1, 2, 3], [1, -1, 1])


def test_logistic_recovers_known_beta(rng):
    n = 30
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    beta = np.array([0.3, -0.8])
    w = np.full(n, 400.0)
    y = rng.binomial(400, expit(X @ beta)) / 400.0
    fit = fit_logistic(X, y, w)
    assert fit.converged
    se = np.sqrt(np.diag(np.linalg.inv((X * (w * expit(X @ fit.coef) * (1 - expit(X @ fit.coef)))[:, None]).T @ X)))
    assert np.all(np.abs(fit.coef - beta) < 2.5 * se)
    # grid-search oracle on the two-parameter likelihood surface
    b0 = np.linspace(fit.coef[0] - 0.05, fit.coef[0] + 0.05, 201)
    b1 = np.linspace(fit.coef[1] - 0.05, fit.coef[1] + 0.05, 201)
    G0, G1 = np.meshgrid(b0, b1, indexing="ij")
    eta = G0[..., None] * X[:, 0] + G1[..., None] * X[:, 1]
    ll = np.sum(w * (y * eta - np.logaddexp(0, eta)), axis=-1)
    i, j = np.unravel_index(np.argmax(ll), ll.shape)
    assert abs(b0[i] - fit.coef[0]) <= 1e-3 and abs(b1[j] - fit.coef[1]) <= 1e-3


def test_logistic_separation_is_flagged():
    X = np.column_stack([np.ones(6), [-3, -2, -1, 1, 2, 3]])
    fit = fit_logistic(X, [0, 0, 0, 1, 1, 1])
    assert fit.separated and not fit.converged
    assert np.all(np.isfinite(fit.coef))


def test_logistic_gradient_is_zero_at_fit(rng):
    X = np.column_stack([np.ones(40), rng.normal(size=(40, 2))])
    y = rng.uniform(0.05, 0.95, size=40)
    fit = fit_logistic(X, y)
    assert np.max(np.abs(logistic_gradient(fit.coef, X, y, np.ones(40)))) < 1e-8


def test_fluctuation_single_point():
    # 2 (0.8 - expit(2 eps)) = 0  ->  eps = logit(0.8) / 2
    f = fit_fluctuation(np.array([0.8]), np.array([0.0]), np.array([2.0]))
    assert f.epsilon == pytest.approx(logit(0.8) / 2, abs=1e-12)
    assert f.epsilon == pytest.approx(0.6931, abs=1e-4)


def test_fluctuation_matches_scalar_root(rng):
    y = rng.uniform(0.05, 0.95, size=12)
    off = rng.normal(size=12)
    h = rng.uniform(1.0, 8.0, size=12)
    w = rng.integers(0, 3, size=12).astype(float)
    f = fit_fluctuation(y, off, h, w)

    def score(e):
        return np.sum(w * h * (y - expit(off + e * h)))

    assert f.epsilon == pytest.approx(brentq(score, -50, 50, xtol=1e-14), abs=1e-10)
    assert abs(score(f.epsilon)) < 1e-9


def test_fluctuation_rejects_boundary_outcomes():
    with pytest.raises(FluctuationError):
        fit_fluctuation(np.array([0.0, 0.5]), np.zeros(2), np.ones(2))


def test_lasso_zero_penalty_equals_logistic(rng):
    X = np.column_stack([np.ones(60), rng.normal(size=(60, 2))])
    y = rng.binomial(1, expit(X @ [0.2, 1.0, -0.5])).astype(float)
    D = DesignMatrix(X, ("intercept", "a", "b"))
    a = fit_lasso_logistic(D, y, 0.0)
    b = fit_logistic(D, y)
    np.testing.assert_allclose(a.coef, b.coef, atol=1e-6)
    # an unnamed constant column is dropped and an intercept added
    c = fit_lasso_logistic(X, y, 0.0)
    np.testing.assert_allclose(c.coef[[0, 2, 3]], b.coef, atol=1e-6)
    assert c.coef[1] == 0.0


def test_lasso_large_penalty_zeroes_slopes(rng):
    X = np.column_stack([np.ones(30), rng.normal(size=(30, 2))])
    y = rng.binomial(1, 0.4, size=30).astype(float)
    lam_max = lasso_lambda_grid(X, y)[0]
    fit = fit_lasso_logistic(X, y, lam_max * 1.0001)
    assert np.all(fit.coef[1:] == 0.0)
    assert expit(fit.coef[0]) == pytest.approx(y.mean(), abs=1e-8)


def test_lasso_kkt_on_mrsa_design(mrsa):
    from nmacausal.propensity import study_design
    t = mrsa.table
    D = study_design(t.x, t.covariate_names)
    y = t.contains[:, 1].astype(float)
    for lam in (0.005, 0.02, 0.08):
        fit = fit_lasso_logistic(D, y, lam)
        e = fit.extra
        P = D.values[:, 1:]
        Z = np.where(e["z_sd"] > 0, (P - e["z_mean"]) / np.where(e["z_sd"] > 0, e["z_sd"], 1), 0.0)
        _, viol = lasso_kkt(Z, y, np.ones(len(y)), e["z_intercept"], e["z_coef"], lam)
        assert viol.max() < 1e-6


def test_lasso_cv_selects_from_grid(mrsa):
    from nmacausal.propensity import study_design
    t = mrsa.table
    D = study_design(t.x, t.covariate_names)
    y = t.contains[:, 1].astype(float)
    lam, grid, dev = select_lasso_lambda(D, y, np.arange(len(y)))
    assert lam in grid and len(grid) == 50
    assert np.all(np.diff(grid) < 0)
    assert dev[list(grid).index(lam)] == pytest.approx(dev.min())


def test_objective_gradient_consistency_simple():
    X = np.array([[1.0, 0.5], [1.0, -1.0], [1.0, 2.0]])
    y = np.array([0.3, 0.9, 0.1])
    w = np.array([1.0, 2.0, 3.0])
    b = np.array([0.1, -0.2])
    h = 1e-6
    num = [(logistic_objective(b + h * e, X, y, w) - logistic_objective(b - h * e, X, y, w)) / (2 * h)
           for e in np.eye(2)]
    np.testing.assert_allclose(logistic_gradient(b, X, y, w), num, rtol=1e-6)
    assert math.isfinite(logistic_objective(b, X, y, w))
