import math

import numpy as np
import pytest
from sklearn.base import clone

from qgm.core import column_scales
from qgm.solver import (QrProblem, QuantileLassoRegressor, kkt_gap, refit_on_support, solve,
                        threshold_support)

from oracles import qr_objective, vertex_oracle


def _design(rng, n, p):
    return np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])


def test_median_of_three():
    fit = solve(QrProblem(np.array([1.0, 2, 3]), np.ones((3, 1)), 0.5))
    assert fit.beta[0] == pytest.approx(2.0, abs=1e-12)


def test_quartile_matches_enumeration():
    y = np.array([1.0, 2, 3, 4])
    fit = solve(QrProblem(y, np.ones((4, 1)), 0.25))
    brute = min(float(np.mean((y - c) * (0.25 - (y - c <= 0)))) for c in y)
    assert brute == pytest.approx(3 / 8)
    assert fit.objective == pytest.approx(brute, abs=1e-12)
    assert 1.0 - 1e-12 <= fit.beta[0] <= 2.0 + 1e-12


def test_huge_penalty_zeroes_slopes(rng):
    n = 41  # n * tau not an integer, so the quantile is unique
    X = _design(rng, n, 3)
    y = rng.normal(size=n)
    load = np.array([0.0, 1.0, 1.0])
    fit = solve(QrProblem(y, X, 0.3, 1e6, load))
    assert np.all(fit.beta[1:] == 0)
    assert fit.beta[0] == pytest.approx(np.sort(y)[math.ceil(0.3 * n) - 1], abs=1e-10)


@pytest.mark.parametrize("seed", range(10))
def test_unpenalized_matches_vertex_oracle(seed):
    rng = np.random.default_rng(seed)
    n, p = int(rng.integers(8, 31)), int(rng.integers(1, 5))
    X = _design(rng, n, p)
    y = X @ rng.normal(size=p) + rng.standard_t(3, size=n)
    tau = float(rng.uniform(0.05, 0.95))
    fit = solve(QrProblem(y, X, tau))
    assert fit.objective == pytest.approx(vertex_oracle(y, X, tau), abs=1e-8)
    assert fit.kkt_gap <= 1e-6


@pytest.mark.parametrize("seed", range(6))
def test_penalized_and_weighted_match_vertex_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    n, p = 20, 3
    X = _design(rng, n, p)
    y = X @ np.array([0.5, 1.0, 0.0]) + rng.normal(size=n)
    k = (rng.uniform(size=n) < 0.8).astype(float)
    load = np.concatenate([[0.0], column_scales(X[:, 1:], k)])
    lam = float(rng.uniform(0.01, 0.3))
    fit = solve(QrProblem(y, X, 0.4, lam, load, k))
    assert fit.objective == pytest.approx(vertex_oracle(y, X, 0.4, lam, load, k), abs=1e-8)


def test_objective_recomputes(rng):
    X = _design(rng, 50, 4)
    y = rng.normal(size=50)
    load = np.array([0, 1.0, 2.0, 0.5])
    fit = solve(QrProblem(y, X, 0.7, 0.05, load))
    assert fit.objective == pytest.approx(qr_objective(y, X, 0.7, fit.beta, 0.05, load), abs=1e-10)


def test_perturbations_never_improve(rng):
    for _ in range(10):
        X = _design(rng, 60, 4)
        y = X @ rng.normal(size=4) + rng.normal(size=60)
        prob = QrProblem(y, X, float(rng.uniform(0.1, 0.9)), 0.05, np.array([0, 1.0, 1, 1]))
        fit = solve(prob)
        for _ in range(50):
            d = rng.choice([-1e-3, 1e-3], size=4) * rng.uniform(size=4)
            assert prob.objective(fit.beta + d) >= fit.objective - 1e-6


def test_quantile_counting(rng):
    X = _design(rng, 101, 3)
    y = X @ np.array([1.0, 2.0, -1.0]) + rng.normal(size=101)
    tau = 0.37
    r = solve(QrProblem(y, X, tau)).residuals
    tol = 1e-9
    assert (r < -tol).sum() <= 101 * tau <= (r <= tol).sum()


def test_scale_equivariance(rng):
    n = 80
    X = _design(rng, n, 4)
    y = X @ np.array([0.0, 1.0, 0.0, 0.5]) + rng.normal(size=n)
    c = 7.5
    X2 = X.copy()
    X2[:, 2] *= c
    fits = []
    for D in (X, X2):
        load = column_scales(D)
        load[0] = 0
        fits.append(solve(QrProblem(y, D, 0.5, 0.05, load)))
    a, b = fits
    assert b.objective == pytest.approx(a.objective, abs=1e-8)
    np.testing.assert_allclose(X @ a.beta, X2 @ b.beta, atol=1e-6)
    assert a.support == b.support
    assert b.beta[2] == pytest.approx(a.beta[2] / c, abs=1e-8)


def test_monotone_in_lambda(rng):
    X = _design(rng, 100, 5)
    y = X @ np.array([0, 1.0, 0.5, 0, 0]) + rng.normal(size=100)
    load = np.array([0, 1.0, 1, 1, 1])
    losses, norms = [], []
    for lam in [0.0, 0.01, 0.03, 0.1, 0.3, 1.0]:
        f = solve(QrProblem(y, X, 0.5, lam, load))
        losses.append(f.loss)
        norms.append(float(load @ np.abs(f.beta)))
    assert all(b >= a - 1e-9 for a, b in zip(losses, losses[1:]))
    assert all(b <= a + 1e-9 for a, b in zip(norms, norms[1:]))


def test_refit_on_support(rng):
    X = _design(rng, 41, 3)
    y = X @ np.array([1.0, 2, 0]) + rng.normal(size=41)
    prob = QrProblem(y, X, 0.5, 0.0, np.array([0, 1.0, 1]))
    full = solve(prob)
    assert refit_on_support(prob, (1, 2)).objective == pytest.approx(full.objective, abs=1e-10)
    empty = refit_on_support(prob, ())
    assert np.all(empty.beta[1:] == 0)
    assert empty.beta[0] == pytest.approx(np.sort(y)[20], abs=1e-10)


def test_refit_matches_vertex_oracle():
    rng = np.random.default_rng(77)
    X = _design(rng, 30, 3)
    y = X @ np.array([0.2, 1.0, -0.5]) + rng.normal(size=30)
    prob = QrProblem(y, X, 0.6, 0.0, np.array([0, 1.0, 1]))
    fit = refit_on_support(prob, (1,))
    assert fit.beta[2] == 0
    assert fit.objective == pytest.approx(vertex_oracle(y, X[:, :2], 0.6), abs=1e-8)


def test_threshold_support_examples():
    beta = np.array([0.5, 0.1])
    assert threshold_support(beta, 0.2, np.ones(2)) == (0,)
    assert threshold_support(beta, 0.0, np.ones(2)) == (0, 1)
    assert threshold_support(beta, np.inf, np.ones(2)) == ()
    assert threshold_support(np.array([0.0, 1.0]), 0.0, np.ones(2)) == (1,)
    # unpenalized coordinates are handled separately
    assert threshold_support(np.array([3.0, 1.0]), 0.0, np.array([0.0, 1.0])) == (1,)


def test_kkt_gap_detects_suboptimal(rng):
    X = _design(rng, 30, 2)
    y = rng.normal(size=30)
    prob = QrProblem(y, X, 0.5)
    fit = solve(prob)
    assert kkt_gap(prob, fit.beta) <= 1e-6
    assert kkt_gap(prob, fit.beta + np.array([5.0, 0])) > 0.1


def test_problem_validation():
    with pytest.raises(ValueError):
        QrProblem(np.ones(3), np.ones((3, 1)), 1.0)
    with pytest.raises(ValueError):
        QrProblem(np.ones(3), np.ones((3, 1)), 0.5, 0.1, support=(0,))
    with pytest.raises(ValueError):
        QrProblem(np.ones(3), np.ones((3, 1)), 0.5, weights=np.zeros(3))


def test_regressor_estimator_api(rng):
    X = rng.normal(size=(200, 6))
    y = 2.0 * X[:, 0] + rng.normal(size=200)
    est = QuantileLassoRegressor(tau=0.5, random_state=3)
    est.fit(X, y)
    assert est.coef_.shape == (6,)
    assert abs(est.coef_[0] - 2.0) < 0.5
    assert np.count_nonzero(est.coef_[1:]) <= 2
    assert est.predict(X).shape == (200,)
    assert clone(est).get_params() == est.get_params()
    fixed = QuantileLassoRegressor(tau=0.5, lam=1e6).fit(X, y)
    assert np.all(fixed.coef_ == 0)
