import numpy as np
import pytest
from sklearn.base import clone

from qgm.core import EventSpec, QgmConfig, SampleMatrix
from qgm.penalty import PenaltyChoice, analytic_lambda0
from qgm.pqgm import (PredictiveQGM, column_to_node, fit_final, fit_pilot, fit_pqgm_node,
                      node_design, residual_signs, run_pqgm)

from oracles import rho


def _location_sample(rng, n, d, noise_sd=0.5):
    X = rng.normal(size=(n, d))
    X[:, 0] = 0.5 * X[:, 1] + noise_sd * rng.normal(size=n)
    return SampleMatrix.from_array(X)


def test_location_model_selects_parent():
    hits = 0
    cfg = QgmConfig(taus=(0.5,), b_boot=300)
    for rep in range(20):
        rng = np.random.default_rng(40 + rep)
        res = run_pqgm(_location_sample(rng, 400, 10), cfg)
        hits += bool(res.graph.adjacency[0, 0, 0, 1])
    assert hits >= 18


@pytest.mark.parametrize("tau", [0.2, 0.5, 0.8])
def test_multiplicative_model_slope(tau):
    rng = np.random.default_rng(7)
    n = 2000
    x2 = rng.exponential(size=n)  # nonnegative, so the quantile stays linear in x2
    x1 = 0.5 + rng.uniform(size=n) * x2  # conditional tau-quantile 0.5 + tau * x2
    sample = SampleMatrix.from_array(np.column_stack([x1, x2]))
    cfg = QgmConfig(taus=(tau,), b_boot=300)
    lam0 = analytic_lambda0(n, 2, 0, cfg.gamma(n), cfg.c_slack)
    fit = fit_pqgm_node(sample, 0, tau, EventSpec.trivial(), lam0, cfg)
    assert 1 in fit.selected
    assert fit.final_refit.beta[1] == pytest.approx(tau, abs=0.1)


def test_infinite_lambda_bar_selects_nothing(rng):
    sample = _location_sample(rng, 300, 4)
    Z = node_design(sample.values, 0)
    k = np.ones(300)
    y = sample.values[:, 0]
    pilot = fit_pilot(y, Z, k, 0.5, 0.05)
    fit = fit_final(y, Z, k, 0.5, pilot, PenaltyChoice(1e12, "bootstrap", 0.99))
    assert fit.selected == ()
    assert np.all(fit.final.beta[1:] == 0)


def test_null_design_has_few_edges():
    counts = []
    cfg = QgmConfig(taus=(0.5,), b_boot=300)
    for rep in range(20):
        rng = np.random.default_rng(900 + rep)
        res = run_pqgm(SampleMatrix.from_array(rng.normal(size=(400, 3))), cfg)
        counts.append(res.graph.edge_count(0))
    assert np.mean(counts) <= 1


def test_residual_signs_values(rng):
    n, tau = 200, 0.35
    Z = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = rng.normal(size=n)
    eps = residual_signs(y, Z, np.array([0.1, 0.2]), tau)
    assert set(np.unique(eps)) <= {-tau, 1 - tau}
    assert -tau <= eps.mean() <= 1 - tau


def test_refit_never_increases_restricted_loss(rng):
    cfg = QgmConfig(taus=(0.3, 0.7), b_boot=300)
    res = run_pqgm(_location_sample(rng, 300, 5), cfg)
    for (t, e, a), nf in res.nodes.items():
        assert nf.final_refit.loss <= nf.final.loss + 1e-10
        assert nf.pilot_refit.loss <= nf.pilot.loss + 1e-10
        sel = {column_to_node(a, c) for c in nf.selected}
        assert sel == set(np.flatnonzero(res.graph.adjacency[t, e, a]).tolist())


def test_loss_parts_recompute(rng):
    sample = _location_sample(rng, 250, 4)
    cfg = QgmConfig(taus=(0.4,), b_boot=300)
    res = run_pqgm(sample, cfg)
    nf = res.nodes[(0, 0, 0)]
    Z = node_design(sample.values, 0)
    y = sample.values[:, 0]
    assert nf.final_refit.loss == pytest.approx(np.mean(rho(y - Z @ nf.final_refit.beta, 0.4)),
                                                abs=1e-10)


def test_selection_is_scale_invariant(rng):
    X = _location_sample(rng, 400, 6).values
    Y = X * np.array([1.0, 25.0, 0.04, 1.0, 3.0, 1.0])
    cfg = QgmConfig(taus=(0.3, 0.5), b_boot=300)
    a = run_pqgm(SampleMatrix.from_array(X), cfg)
    b = run_pqgm(SampleMatrix.from_array(Y), cfg)
    np.testing.assert_array_equal(a.graph.adjacency, b.graph.adjacency)


def test_trivial_event_matches_unconditional(rng):
    n = 300
    w = rng.normal(size=n)
    base = _location_sample(rng, n, 4)
    with_w = SampleMatrix.from_array(base.values, w=w)
    cfg = QgmConfig(taus=(0.5,), b_boot=300)
    a = run_pqgm(base, cfg)
    b = run_pqgm(with_w, cfg.replace(events=(EventSpec.lower_tail(float(w.max())),)))
    np.testing.assert_array_equal(a.graph.adjacency, b.graph.adjacency)
    np.testing.assert_array_equal(a.graph.coef, b.graph.coef)
    assert a.lambda_bar.value == b.lambda_bar.value


def test_pipeline_determinism_across_threads(rng):
    sample = _location_sample(rng, 200, 5)
    cfg = QgmConfig(taus=(0.3, 0.6), b_boot=200, seed=5)
    assert run_pqgm(sample, cfg, threads=1).graph.to_json() == \
        run_pqgm(sample, cfg, threads=3).graph.to_json()


def test_estimator_api(rng):
    X = _location_sample(rng, 400, 5).values
    est = PredictiveQGM(taus=(0.5,), b_boot=300, random_state=2)
    assert clone(est).get_params() == est.get_params()
    est.fit(X)
    adj = est.get_adjacency()
    assert adj[0, 1]
    assert est.coef_.shape == (1, 1, 5, 5)
    assert np.isfinite(est.lambda_)
