"""Predictive quantile graphical models.

Per node and quantile: a pilot penalized fit at the closed-form level,
thresholding and refit, residual signs, then a final penalized fit whose
loadings and penalty come from those signs.  The final penalty is one
multiplier-bootstrap value shared by all nodes, quantiles and events.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import (DegenerateDesign, EventSpec, EventTooSmall, QgmConfig, RngPolicy,
                   SampleMatrix, column_scales, event_weights, ordered_map, resolve_events,
                   resolve_threads)
from .graph import GraphEstimate
from .penalty import PenaltyChoice, analytic_lambda0, bootstrap_lambda
from .solver import QrFit, QrProblem, SolverError, refit_on_support, solve, threshold_support


def node_design(values, a: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.column_stack([np.ones(values.shape[0]), np.delete(values, a, axis=1)])


def column_to_node(a: int, c: int) -> int:
    """Node index of design column ``c >= 1`` in node ``a``'s design."""
    b = c - 1
    return b if b < a else b + 1


def threshold_weights(loadings, scales) -> np.ndarray:
    """Weights ``w_j`` such that column ``j`` survives when ``|beta_j| w_j >= lam``.

    The cut-off is the coordinate's penalty weight ``lam * loadings_j``
    divided by ``scales_j^2``; with ``loadings = scales`` this is the usual
    ``|beta_j| scales_j >= lam``.
    """
    loadings = np.asarray(loadings, dtype=float)
    scales = np.asarray(scales, dtype=float)
    out = np.zeros_like(loadings)
    pos = loadings > 0
    out[pos] = scales[pos] ** 2 / loadings[pos]
    return out


def _penalized_step(y, Z, k, tau, lam, loadings, kkt_tol, scales=None, cut=1.0):
    """Solve on the columns with positive loading (plus intercept), threshold at
    ``cut * lam``, refit."""
    p = Z.shape[1]
    keep = np.concatenate([[0], 1 + np.flatnonzero(loadings[1:] > 0)])
    problem = QrProblem(y, Z[:, keep], tau, lam, loadings[keep], k)
    pen = solve(problem, kkt_tol=kkt_tol)
    weights = loadings if scales is None else threshold_weights(loadings, scales)
    local = threshold_support(pen.beta, cut * lam, weights[keep])
    post = refit_on_support(problem, local, kkt_tol=kkt_tol)

    def expand(fit: QrFit) -> QrFit:
        beta = np.zeros(p)
        beta[keep] = fit.beta
        return dataclasses.replace(fit, beta=beta,
                                   support=tuple(int(keep[j]) for j in fit.support))

    return expand(pen), expand(post), tuple(int(keep[j]) for j in local)


@dataclass(frozen=True)
class PilotFit:
    pilot: QrFit
    pilot_refit: QrFit
    eps_hat: np.ndarray
    loadings: np.ndarray


@dataclass(frozen=True)
class PqgmNodeFit:
    pilot: QrFit
    pilot_refit: QrFit
    eps_hat: np.ndarray
    lambda_bar: PenaltyChoice
    final: QrFit
    final_refit: QrFit
    selected: tuple  # design columns
    loadings_final: np.ndarray = field(repr=False, default=None)
    dropped: tuple = ()  # columns whose residual-weighted loading vanished


def residual_signs(y, Z, beta, tau: float) -> np.ndarray:
    """``1{y <= Z beta} - tau``, taking values in ``{-tau, 1 - tau}``."""
    return (np.asarray(y) <= Z @ beta).astype(float) - tau


def fit_pilot(y, Z, k, tau: float, lam0: float, kkt_tol: float = 1e-6, cut: float = 1.0) -> PilotFit:
    loadings = column_scales(Z, k)
    loadings[0] = 0.0
    pen, post, _ = _penalized_step(y, Z, k, tau, lam0, loadings, kkt_tol, cut=cut)
    return PilotFit(pen, post, residual_signs(y, Z, post.beta, tau), loadings)


def residual_loadings(Z, k, eps) -> np.ndarray:
    """``sqrt(E_n[k eps^2 Z_j^2])`` with the intercept loading set to 0."""
    load = column_scales(Z, np.asarray(k) * eps * eps)
    load[0] = 0.0
    return load


def fit_final(y, Z, k, tau: float, pilot: PilotFit, lambda_bar: PenaltyChoice,
              kkt_tol: float = 1e-6, cut: float = 1.0) -> PqgmNodeFit:
    load = residual_loadings(Z, k, pilot.eps_hat)
    dropped = tuple(int(j) for j in range(1, Z.shape[1]) if load[j] == 0)
    scales = column_scales(Z, k)
    pen, post, selected = _penalized_step(y, Z, k, tau, lambda_bar.value, load, kkt_tol, scales,
                                          cut)
    return PqgmNodeFit(pilot.pilot, pilot.pilot_refit, pilot.eps_hat, lambda_bar, pen, post,
                       selected, load, dropped)


def fit_pqgm_node(sample: SampleMatrix, a: int, tau: float, event: EventSpec,
                  lambda0: PenaltyChoice, config: QgmConfig,
                  lambda_bar: Optional[PenaltyChoice] = None) -> PqgmNodeFit:
    """All steps for one node.

    Without ``lambda_bar`` the bootstrap penalty is computed from this node's
    residual signs alone; the pipeline passes the joint value instead.
    """
    Z = node_design(sample.values, a)
    k, _ = event_weights(event, sample, Z.shape[1])
    y = sample.values[:, a]
    pilot = fit_pilot(y, Z, k, tau, lambda0.value, config.kkt_tol, config.threshold_scale())
    if lambda_bar is None:
        load = residual_loadings(Z, k, pilot.eps_hat)
        cols = np.flatnonzero(load > 0)
        lambda_bar = bootstrap_lambda([pilot.eps_hat], [Z[:, cols]], [k], 1.0 / sample.n,
                                      config.b_boot, RngPolicy(config.seed))
    return fit_final(y, Z, k, tau, pilot, lambda_bar, config.kkt_tol, config.threshold_scale())


@dataclass
class PqgmResult:
    graph: GraphEstimate
    lambda0: PenaltyChoice
    lambda_bar: PenaltyChoice
    nodes: dict  # (t, e, a) -> PqgmNodeFit
    warnings: list = field(default_factory=list)


def run_pqgm(sample: SampleMatrix, config: QgmConfig, threads: Optional[int] = None) -> PqgmResult:
    threads = resolve_threads(threads if threads is not None else config.threads)
    n, d = sample.n, sample.d
    taus = config.taus
    events = resolve_events(config.events, sample)
    designs = [node_design(sample.values, a) for a in range(d)]
    warnings = []
    weights = []
    for ev in events:
        try:
            weights.append(event_weights(ev, sample, d)[0])
        except EventTooSmall as exc:
            weights.append(None)
            warnings.append(str(exc))
    lam0 = analytic_lambda0(n, d, config.d_w, config.gamma(n), config.c_slack)
    cut = config.threshold_scale()
    keys = [(t, e, a) for t in range(len(taus)) for e in range(len(events))
            if weights[e] is not None for a in range(d)]
    errors = {}

    def pilot_task(key):
        t, e, a = key
        try:
            return fit_pilot(sample.values[:, a], designs[a], weights[e], taus[t], lam0.value,
                             config.kkt_tol, cut)
        except (SolverError, DegenerateDesign, np.linalg.LinAlgError) as exc:
            return exc

    pilots = dict(zip(keys, ordered_map(pilot_task, keys, threads)))
    eps_list, x_list, w_list = [], [], []
    for key, pf in pilots.items():
        if isinstance(pf, Exception):
            errors[key] = f"{type(pf).__name__}: {pf}"
            continue
        t, e, a = key
        load = residual_loadings(designs[a], weights[e], pf.eps_hat)
        cols = 1 + np.flatnonzero(load[1:] > 0)
        if cols.size:
            eps_list.append(pf.eps_hat)
            x_list.append(designs[a][:, cols])
            w_list.append(weights[e])
    policy = RngPolicy(config.seed)
    if eps_list:
        lam_bar = bootstrap_lambda(eps_list, x_list, w_list, 1.0 / n, config.b_boot, policy)
    else:
        lam_bar = PenaltyChoice(float("inf"), "bootstrap", 1.0 - 1.0 / n)
    if lam_bar.saturated:
        warnings.append(f"bootstrap quantile at level {lam_bar.level:.6g} uses the largest of "
                        f"{lam_bar.draws} draws")

    final_keys = [k_ for k_ in keys if k_ not in errors]

    def final_task(key):
        t, e, a = key
        try:
            return fit_final(sample.values[:, a], designs[a], weights[e], taus[t], pilots[key],
                             lam_bar, config.kkt_tol, cut)
        except (SolverError, DegenerateDesign, np.linalg.LinAlgError) as exc:
            return exc

    nodes = {}
    for key, nf in zip(final_keys, ordered_map(final_task, final_keys, threads)):
        if isinstance(nf, Exception):
            errors[key] = f"{type(nf).__name__}: {nf}"
        else:
            nodes[key] = nf

    T, E = len(taus), len(events)
    adj = np.zeros((T, E, d, d), dtype=bool)
    stat = np.zeros((T, E, d, d))
    coef = np.zeros((T, E, d, d))
    failed = np.ones((T, E, d), dtype=bool)
    for (t, e, a), nf in nodes.items():
        failed[t, e, a] = False
        for c in range(1, d):
            b = column_to_node(a, c)
            coef[t, e, a, b] = nf.final_refit.beta[c]
            if np.isfinite(lam_bar.value) and lam_bar.value > 0:
                w = threshold_weights(nf.loadings_final, column_scales(designs[a], weights[e]))
                stat[t, e, a, b] = abs(nf.final.beta[c]) * w[c] / lam_bar.value
        for c in nf.selected:
            adj[t, e, a, column_to_node(a, c)] = True
        if nf.dropped:
            warnings.append(f"node {sample.names[a]} tau={taus[t]} event={events[e].label}: "
                            f"dropped columns {[sample.names[column_to_node(a, c)] for c in nf.dropped]}")
    for (t, e, a), msg in sorted(errors.items()):
        warnings.append(f"node {sample.names[a]} tau={taus[t]} event={events[e].label}: {msg}")
    meta = {"lambda0": lam0.value, "lambda_bar": lam_bar.value, "lambda_bar_level": lam_bar.level,
            "lambda_bar_draws": lam_bar.draws, "seed": config.seed}
    graph = GraphEstimate(sample.names, taus, tuple(ev.label for ev in events), adj, stat, coef,
                          failed, "p", meta)
    return PqgmResult(graph, lam0, lam_bar, nodes, warnings)


class PredictiveQGM(BaseEstimator):
    """Estimator wrapper around :func:`run_pqgm`."""

    def __init__(self, taus=(0.2, 0.5, 0.8), events=None, c_slack=1.1, gamma_level=None,
                 b_boot=500, random_state=0, n_jobs=1):
        self.taus = taus
        self.events = events
        self.c_slack = c_slack
        self.gamma_level = gamma_level
        self.b_boot = b_boot
        self.random_state = random_state
        self.n_jobs = n_jobs

    def fit(self, X, y=None, w=None):
        names = getattr(X, "columns", None)
        names = None if names is None else [str(c) for c in names]
        X = check_array(X)
        events = (EventSpec.trivial(),) if self.events is None else tuple(self.events)
        config = QgmConfig(c_slack=self.c_slack, gamma_level=self.gamma_level, b_boot=self.b_boot,
                           taus=tuple(self.taus), events=events, seed=self.random_state,
                           threads=self.n_jobs)
        self.result_ = run_pqgm(SampleMatrix.from_array(X, names, w), config)
        self.graph_ = self.result_.graph
        self.adjacency_ = self.graph_.union(0)
        self.coef_ = self.graph_.coef
        self.lambda_ = self.result_.lambda_bar.value
        self.n_features_in_ = X.shape[1]
        return self

    def get_adjacency(self, tau_index=None, event=0):
        check_is_fitted(self, "graph_")
        if tau_index is None:
            return self.graph_.union(event)
        return self.graph_.adjacency[tau_index, event].copy()
