import numpy as np
import pytest
from scipy.optimize import minimize

from qgm.lasso import (initial_loadings, lasso_kkt_gap, lasso_objective, post_lasso,
                       RankDeficientRefit, weighted_lasso, weighted_post_lasso)


def _bounded_qp_oracle(t, R, k, lam, loadings):
    """Lasso through the split g = u - v with u, v >= 0, solved by L-BFGS-B."""
    n, p = R.shape
    G = (R.T * k) @ R / n
    c = (R.T * k) @ t / n
    const = float(k @ (t * t)) / n

    def fun(z):
        g = z[:p] - z[p:]
        val = g @ G @ g - 2 * c @ g + const + lam * loadings @ (z[:p] + z[p:])
        grad_g = 2 * (G @ g - c)
        return val, np.concatenate([grad_g + lam * loadings, -grad_g + lam * loadings])

    res = minimize(fun, np.zeros(2 * p), jac=True, method="L-BFGS-B",
                   bounds=[(0, None)] * (2 * p), options=dict(ftol=1e-15, gtol=1e-12, maxiter=10000))
    return float(res.fun)


def test_exact_linear_target_recovers_single_regressor(rng):
    n = 200
    R = rng.normal(size=(n, 5))
    t = 2.0 * R[:, 1]
    fit = weighted_post_lasso(t, R, np.ones(n), 0.05)
    assert fit.support == (1,)
    assert np.linalg.norm(fit.residuals) < 1e-10
    assert fit.gamma[1] == pytest.approx(2.0, abs=1e-10)


def test_huge_lambda_gives_empty_support(rng):
    n = 50
    R = rng.normal(size=(n, 3))
    t = R @ np.array([1.0, -1.0, 0.5]) + rng.normal(size=n)
    fit = weighted_post_lasso(t, R, np.ones(n), 1e8)
    assert fit.support == ()
    np.testing.assert_allclose(fit.residuals, t)


def test_zero_lambda_equals_least_squares(rng):
    n, p = 20, 4
    R = rng.normal(size=(n, p))
    t = rng.normal(size=n)
    fit = weighted_post_lasso(t, R, np.ones(n), 0.0)
    ols = np.linalg.solve(R.T @ R, R.T @ t)  # normal equations
    np.testing.assert_allclose(fit.gamma, ols, atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_penalized_solve_matches_qp_oracle(seed):
    rng = np.random.default_rng(seed)
    n, p = 60, 6
    R = rng.normal(size=(n, p))
    t = R @ np.array([1.0, 0, 0, -0.5, 0, 0]) + rng.normal(size=n)
    k = (rng.uniform(size=n) < 0.7).astype(float)
    load = rng.uniform(0.5, 2.0, size=p)
    lam = 0.1
    gamma, gap = weighted_lasso(t, R, k, lam, load)
    assert gap <= 1e-6
    ours = lasso_objective(t, R, k, lam, load, gamma)
    assert ours == pytest.approx(_bounded_qp_oracle(t, R, k, lam, load), abs=1e-7)


def test_objective_recomputes(rng):
    n = 80
    R = rng.normal(size=(n, 4))
    t = R[:, 0] + rng.normal(size=n)
    k = np.ones(n)
    fit = weighted_post_lasso(t, R, k, 0.2)
    again = lasso_objective(t, R, k, 0.2, fit.loadings_final, fit.gamma_penalized)
    assert fit.objective == pytest.approx(again, abs=1e-10)
    G = R.T @ R / n
    c = R.T @ t / n
    assert lasso_kkt_gap(G, c, 0.2, fit.loadings_final, fit.gamma_penalized) <= 1e-6


def test_refit_residuals_orthogonal_to_support(rng):
    n = 150
    R = rng.normal(size=(n, 8))
    t = R[:, [0, 3]] @ np.array([1.5, -1.0]) + rng.normal(size=n)
    k = (rng.uniform(size=n) < 0.8).astype(float)
    fit = weighted_post_lasso(t, R, k, 0.1)
    assert fit.support
    for j in fit.support:
        assert abs(np.mean(k * R[:, j] * fit.residuals)) <= 1e-8


def test_loadings_shrink_from_conservative_start():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        n = 300
        R = rng.normal(size=(n, 10))
        t = R[:, 2] + 0.5 * rng.normal(size=n)
        k = np.ones(n)
        fit = weighted_post_lasso(t, R, k, 0.1)
        start = initial_loadings(t, R, k)
        assert np.all(fit.loadings_final <= start + 1e-12)


def test_refit_row_budget():
    R = np.eye(4)
    with pytest.raises(RankDeficientRefit):
        post_lasso(np.ones(4), R, np.ones(4), (0, 1, 2))


def test_collinear_support_drops_newest_column(rng):
    x = rng.normal(size=30)
    R = np.column_stack([x, 2 * x, rng.normal(size=30)])
    gamma, kept, dropped = post_lasso(x, R, np.ones(30), (0, 1, 2))
    assert dropped == (1,) and kept == (0, 2)
    assert gamma[1] == 0
