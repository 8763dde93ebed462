"""Conditional-independence quantile graphical models.

For every node ``a``, quantile index ``tau`` and event the pipeline runs

1. a loading-scaled l1-penalized quantile regression of ``X_a`` on the
   design ``Z^a`` at the pivotal penalty, thresholding and an unpenalized
   refit;
2. for each tested column ``j``, a density-weighted post-Lasso of
   ``f Z_j`` on ``f Z_{-j}`` giving the instrument ``v``;
3. a one-dimensional search of the self-normalised orthogonal score, its
   standard error and t-statistic.

Edges are declared by comparing the largest |t| in a column group with a
multiplier-bootstrap critical value (optionally with stepdown).  The
cheaper ``"support"`` rule reads edges off the Step-1 thresholded support.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import (DegenerateDesign, EventSpec, EventTooSmall, QgmConfig, QgmError, RngPolicy,
                   SampleMatrix, column_scales, event_weights, order_statistic, ordered_map,
                   resolve_events, resolve_threads, std_normals)
from .graph import GraphEstimate
from .lasso import LassoFit, weighted_post_lasso
from .penalty import BLOCK, PenaltyChoice, lasso_lambda, lasso_log_N, pivotal_lambda
from .solver import (QrFit, QrProblem, SolverError, refit_on_support, solve,
                     threshold_support)


class DegenerateInstrument(QgmError):
    pass


# ---------------------------------------------------------------------------
# designs


@dataclass(frozen=True)
class Design:
    """Regressors for one node; column 0 is the intercept.

    ``sources[c]`` is the node a column was derived from (-1 for the
    intercept) and ``transforms[c]`` the derivation.
    """

    Z: np.ndarray
    sources: tuple
    transforms: tuple

    @property
    def p(self) -> int:
        return self.Z.shape[1]

    def groups(self) -> dict:
        out = {}
        for c, b in enumerate(self.sources):
            if b >= 0:
                out.setdefault(b, []).append(c)
        return {b: tuple(cols) for b, cols in out.items()}

    def linear_column(self, b: int) -> int:
        for c, (src, tr) in enumerate(zip(self.sources, self.transforms)):
            if src == b and tr == "linear":
                return c
        raise KeyError(b)


_TRANSFORMS = {"square": np.square, "abs": np.abs}


def build_design(values, a: int, expansions=()) -> Design:
    values = np.asarray(values, dtype=float)
    n, d = values.shape
    others = [b for b in range(d) if b != a]
    cols = [np.ones(n)]
    sources = [-1]
    transforms = ["intercept"]
    for b in others:
        cols.append(values[:, b])
        sources.append(b)
        transforms.append("linear")
    for name in expansions:
        fn = _TRANSFORMS[name]
        for b in others:
            cols.append(fn(values[:, b]))
            sources.append(b)
            transforms.append(name)
    return Design(np.column_stack(cols), tuple(sources), tuple(transforms))


# ---------------------------------------------------------------------------
# Step 1


@dataclass(frozen=True)
class NodeFit:
    penalized: QrFit
    post: QrFit
    support: tuple  # selected non-intercept columns
    loadings: np.ndarray
    lam: float
    dropped: tuple = ()  # columns with zero loading on the event


def _expand(fit: QrFit, keep: np.ndarray, p: int) -> QrFit:
    beta = np.zeros(p)
    beta[keep] = fit.beta
    return dataclasses.replace(fit, beta=beta, support=tuple(int(keep[j]) for j in fit.support))


def fit_quantile_step(y, Z, k, tau: float, lam: float, kkt_tol: float = 1e-6,
                      threshold_scale: float = 1.0) -> NodeFit:
    """Penalized fit with loadings ``sqrt(E_n[k Z_j^2])``, threshold at
    ``threshold_scale * lam``, refit.

    Columns that vanish on the active rows are left out of the problem.
    """
    Z = np.asarray(Z, dtype=float)
    p = Z.shape[1]
    loadings = column_scales(Z, k)
    loadings[0] = 0.0
    keep = np.concatenate([[0], 1 + np.flatnonzero(loadings[1:] > 0)])
    dropped = tuple(int(j) for j in range(1, p) if loadings[j] == 0)
    problem = QrProblem(y, Z[:, keep], tau, lam, loadings[keep], k)
    pen = solve(problem, kkt_tol=kkt_tol)
    local = threshold_support(pen.beta, threshold_scale * lam, loadings[keep])
    post = refit_on_support(problem, local, kkt_tol=kkt_tol)
    support = tuple(int(keep[j]) for j in local)
    return NodeFit(_expand(pen, keep, p), _expand(post, keep, p), support, loadings, lam, dropped)


def step_lambda(lam_vt: float, tau: float) -> float:
    return lam_vt * math.sqrt(tau * (1.0 - tau))


def fit_node(sample: SampleMatrix, a: int, tau: float, event: EventSpec, lam: PenaltyChoice,
             config: QgmConfig, design: Optional[Design] = None) -> NodeFit:
    """Step 1 for node ``a``; ``lam`` is the pivotal level before the ``sqrt(tau(1-tau))`` scaling."""
    design = design or build_design(sample.values, a, config.expansions)
    k, _ = event_weights(event, sample, design.p)
    return fit_quantile_step(sample.values[:, a], design.Z, k, tau,
                             step_lambda(lam.value, tau), config.kkt_tol, config.threshold_scale())


# ---------------------------------------------------------------------------
# density


@dataclass(frozen=True)
class DensityEstimate:
    f_hat: np.ndarray
    h: float
    clipped_count: int


def density_from_quantiles(q_hi, q_lo, h: float, floor: float, k=None) -> DensityEstimate:
    """``2h / max(q_hi - q_lo, floor)``; floored rows are counted among active rows."""
    diff = np.asarray(q_hi, dtype=float) - np.asarray(q_lo, dtype=float)
    clipped = diff < floor
    if k is not None:
        clipped &= np.asarray(k) > 0
    return DensityEstimate(2.0 * h / np.maximum(diff, floor), h, int(clipped.sum()))


def estimate_density(y, Z, k, tau: float, h: float, lam_vt: float, config: QgmConfig,
                     center: Optional[NodeFit] = None):
    """Difference-quotient density at the conditional ``tau``-quantile.

    Both neighbouring quantiles are refitted on the union of the thresholded
    supports at ``tau - h``, ``tau`` and ``tau + h``; separate supports make
    the two fitted quantile surfaces cross far more often.
    Returns the estimate and the two refits.
    """
    if not (0 < tau - h and tau + h < 1):
        raise ValueError("tau +/- h must lie in (0, 1)")
    y = np.asarray(y, dtype=float)
    cut = config.threshold_scale()
    hi = fit_quantile_step(y, Z, k, tau + h, step_lambda(lam_vt, tau + h), config.kkt_tol, cut)
    lo = fit_quantile_step(y, Z, k, tau - h, step_lambda(lam_vt, tau - h), config.kkt_tol, cut)
    support = set(hi.support) | set(lo.support)
    if center is not None:
        support |= set(center.support)
    keep = np.concatenate([[0], 1 + np.flatnonzero(hi.loadings[1:] > 0)])
    local = [int(np.flatnonzero(keep == j)[0]) for j in sorted(support)]
    refits = []
    for t in (tau + h, tau - h):
        problem = QrProblem(y, Z[:, keep], t, 0.0, hi.loadings[keep], k)
        refits.append(_expand(refit_on_support(problem, local, config.kkt_tol), keep, Z.shape[1]))
    dens = density_from_quantiles(Z @ refits[0].beta, Z @ refits[1].beta, h,
                                  config.density_floor, k)
    return dens, refits[0], refits[1]


# ---------------------------------------------------------------------------
# Steps 2 and 3


@dataclass(frozen=True)
class ScoreEstimate:
    node: int
    column: int
    tau: float
    event: int
    beta_check: float
    se: float
    t_stat: float
    v_tilde: np.ndarray = field(repr=False)
    alpha_interval: tuple = ()
    L_curve: tuple = field(default=(), repr=False)  # (grid, values)
    psi: np.ndarray = field(default=None, repr=False)
    lasso_support: tuple = ()


def score_objective(alphas, r, zj, v, k, tau):
    """``L(alpha)`` for many ``alpha`` at once.

    With ``ind_i = 1{r_i <= zj_i * alpha}`` the numerator is
    ``(E_n[k (ind - tau) v])^2`` and the denominator ``E_n[k (ind - tau)^2 v^2]``.
    """
    alphas = np.asarray(alphas, dtype=float)
    n = r.shape[0]
    q1 = k * v
    q2 = k * v * v
    tot1, tot2 = q1.sum(), q2.sum()
    s1 = np.zeros(alphas.shape)
    s2 = np.zeros(alphas.shape)
    zero = zj == 0
    s1 += q1[zero & (r <= 0)].sum()
    s2 += q2[zero & (r <= 0)].sum()
    for sign in (1, -1):
        m = (np.sign(zj) == sign)
        if not m.any():
            continue
        bp = r[m] / zj[m]
        order = np.argsort(bp, kind="stable")
        bp = bp[order]
        c1 = np.concatenate([[0.0], np.cumsum(q1[m][order])])
        c2 = np.concatenate([[0.0], np.cumsum(q2[m][order])])
        if sign > 0:
            # ind = 1 when bp <= alpha
            idx = np.searchsorted(bp, alphas, side="right")
            s1 += c1[idx]
            s2 += c2[idx]
        else:
            # ind = 1 when bp >= alpha
            idx = np.searchsorted(bp, alphas, side="left")
            s1 += c1[-1] - c1[idx]
            s2 += c2[-1] - c2[idx]
    num = (s1 - tau * tot1) / n
    den = (tau * tau * tot2 + (1.0 - 2.0 * tau) * s2) / n
    return num * num / den


def search_alpha(r, zj, v, k, tau, center: float, half_width: float, grid_points: int,
                 with_breakpoints: bool = True, with_grid: bool = True):
    """Minimise :func:`score_objective` over ``[center - hw, center + hw]``.

    Candidates are an equally spaced grid plus every breakpoint in the
    interval and the midpoints between consecutive candidates; ties go to
    the candidate closest to ``center``.
    """
    lo, hi = center - half_width, center + half_width
    grid = np.linspace(lo, hi, grid_points)
    parts = [grid] if with_grid else [np.array([lo, hi])]
    if with_breakpoints:
        nz = zj != 0
        bp = r[nz] / zj[nz]
        parts.append(bp[(bp >= lo) & (bp <= hi)])
    cand = np.unique(np.concatenate(parts))
    if cand.size > 1:
        cand = np.unique(np.concatenate([cand, 0.5 * (cand[1:] + cand[:-1])]))
    vals = score_objective(cand, r, zj, v, k, tau)
    best = vals.min()
    ties = np.flatnonzero(vals <= best + 1e-15 * max(1.0, abs(best)))
    pick = ties[np.argmin(np.abs(cand[ties] - center))]
    grid_vals = score_objective(grid, r, zj, v, k, tau)
    return float(cand[pick]), float(vals[pick]), (grid, grid_vals)


def orthogonal_score(y, Z, k, tau: float, j: int, node_fit: NodeFit, f_hat, lam_lasso: float,
                     config: QgmConfig, node: int = 0, event: int = 0) -> ScoreEstimate:
    """Steps 2 and 3 for column ``j`` of ``Z``."""
    y = np.asarray(y, dtype=float)
    n, p = Z.shape
    k = np.asarray(k, dtype=float)
    others = np.array([c for c in range(p) if c != j and (c == 0 or node_fit.loadings[c] > 0)])
    t = f_hat * Z[:, j]
    R = f_hat[:, None] * Z[:, others]
    lfit: LassoFit = weighted_post_lasso(t, R, k, lam_lasso, config.kkt_tol)
    v = lfit.residuals
    s_v2 = float(np.mean(k * v * v))
    if s_v2 == 0.0:
        raise DegenerateInstrument(f"instrument residual vanishes for column {j}")
    beta = node_fit.post.beta
    r = y - Z[:, others] @ beta[others]
    sigma_j = node_fit.loadings[j]
    half = 10.0 / (sigma_j * math.log(n))
    alpha, _, curve = search_alpha(r, Z[:, j], v, k, tau, float(beta[j]), half,
                                   config.alpha_grid_points)
    jac = float(np.mean(k * f_hat * Z[:, j] * v))
    if jac == 0.0:
        raise DegenerateInstrument(f"zero Jacobian for column {j}")
    sigma = math.sqrt(tau * (1.0 - tau) * s_v2)
    se = sigma / abs(jac)
    t_stat = math.sqrt(n) * alpha / se
    ind = (y <= Z @ node_fit.penalized.beta).astype(float)
    psi = (tau - ind) * k * v / sigma
    return ScoreEstimate(node, j, tau, event, alpha, se, t_stat, v,
                         (float(beta[j]) - half, float(beta[j]) + half), curve, psi,
                         tuple(int(others[c]) for c in lfit.support))


# ---------------------------------------------------------------------------
# critical values


@dataclass(frozen=True)
class CriticalValue:
    cv: float  # final critical value
    sequence: tuple  # one entry per stepdown round
    rejected: tuple  # indices of rejected hypotheses
    draws: int = 0


def bootstrap_cv(psi, groups, level: float, B: int, rng_policy: RngPolicy,
                 stepdown: bool = False, observed=None) -> CriticalValue:
    """Multiplier-bootstrap critical value for max-|t| over column groups.

    ``psi`` is ``n x S`` (one column per score); ``groups`` lists, per
    hypothesis, the score columns it maximises over.  One normal vector per
    draw multiplies every score.  With ``stepdown`` and ``observed`` group
    statistics, rejected hypotheses are removed and the value recomputed
    until nothing changes.
    """
    psi = np.asarray(psi, dtype=float)
    n = psi.shape[0]
    H = len(groups)
    if H == 0:
        return CriticalValue(0.0, (0.0,), (), B)
    # per-draw, per-hypothesis maxima
    stats = np.empty((H, B))
    start = 0
    for block, size in _blocks(B):
        g = std_normals(rng_policy.generator("bootstrap_cv", block), (n, size))
        G = np.abs(psi.T @ g) / math.sqrt(n)
        for h, cols in enumerate(groups):
            stats[h, start:start + size] = G[list(cols)].max(axis=0)
        start += size
    active = np.ones(H, dtype=bool)
    rejected = np.zeros(H, dtype=bool)
    obs = None if observed is None else np.asarray(observed, dtype=float)
    seq = [order_statistic(stats.max(axis=0), level)]
    while obs is not None:
        new = active & (obs > seq[-1])
        if not new.any():
            break
        rejected |= new
        active &= ~new
        if not stepdown or not active.any():
            break
        seq.append(order_statistic(stats[active].max(axis=0), level))
    return CriticalValue(seq[-1], tuple(seq), tuple(int(h) for h in np.flatnonzero(rejected)), B)


def _blocks(B):
    for start in range(0, B, BLOCK):
        yield start // BLOCK, min(BLOCK, B - start)


def build_ci_graph(stat, cv: float, names, taus, events, coef=None, failed=None,
                   meta=None) -> GraphEstimate:
    """Edge ``(a, b)`` iff the group statistic ``stat[t, e, a, b]`` exceeds ``cv``."""
    stat = np.asarray(stat, dtype=float)
    adj = stat > cv
    idx = np.arange(stat.shape[-1])
    adj[..., idx, idx] = False
    coef = np.zeros_like(stat) if coef is None else coef
    return GraphEstimate(tuple(names), tuple(taus), tuple(events), adj, stat, coef, failed,
                         "ci", dict(meta or {}))


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class NodeResult:
    t: int
    e: int
    a: int
    fit: Optional[NodeFit] = None
    density: Optional[DensityEstimate] = None
    scores: list = field(default_factory=list)
    error: Optional[str] = None


@dataclass
class CiqgmResult:
    graph: GraphEstimate
    lam: PenaltyChoice
    nodes: dict  # (t, e, a) -> NodeResult
    cv: Optional[CriticalValue] = None
    lasso_lam: Optional[float] = None
    warnings: list = field(default_factory=list)


def _node_task(sample, design, k, tau, h, lam_vt, lam_lasso, rule, config, key):
    t, e, a = key
    res = NodeResult(t, e, a)
    y = sample.values[:, a]
    try:
        res.fit = fit_quantile_step(y, design.Z, k, tau, step_lambda(lam_vt, tau), config.kkt_tol,
                                    config.threshold_scale())
        if rule == "score":
            dens, _, _ = estimate_density(y, design.Z, k, tau, h, lam_vt, config, res.fit)
            res.density = dens
            for b, cols in sorted(design.groups().items()):
                for j in cols:
                    if res.fit.loadings[j] == 0:
                        continue
                    res.scores.append(orthogonal_score(y, design.Z, k, tau, j, res.fit,
                                                       dens.f_hat, lam_lasso, config, a, e))
    except (SolverError, DegenerateDesign, DegenerateInstrument, np.linalg.LinAlgError) as exc:
        res.error = f"{type(exc).__name__}: {exc}"
    return res


def run_ciqgm(sample: SampleMatrix, config: QgmConfig, rule: Optional[str] = None,
              threads: Optional[int] = None) -> CiqgmResult:
    """Full pipeline over all quantile indices, events and nodes.

    ``rule`` overrides ``config.graph_rule`` (``"score"`` or ``"support"``).
    Node failures are isolated and flagged in the graph.
    """
    rule = rule or config.graph_rule
    threads = resolve_threads(threads if threads is not None else config.threads)
    n, d = sample.n, sample.d
    taus = config.taus
    events = resolve_events(config.events, sample)
    designs = [build_design(sample.values, a, config.expansions) for a in range(d)]
    p = designs[0].p
    warnings = []
    weights = []
    usable = []
    for e, ev in enumerate(events):
        try:
            k, _ = event_weights(ev, sample, p)
            weights.append(k)
            usable.append(e)
        except EventTooSmall as exc:
            weights.append(None)
            warnings.append(str(exc))
    policy = RngPolicy(config.seed)
    xi = config.gamma(n)
    active_w = [weights[e] for e in usable]
    if active_w:
        raw = pivotal_lambda([dz.Z for dz in designs], taus, active_w, xi, config.b_penalty,
                             policy, config.d_w)
        lam = dataclasses.replace(raw, value=config.c_slack * raw.value)
    else:
        lam = PenaltyChoice(float("inf"), "pivotal", 0.0)
    if lam.saturated:
        warnings.append(f"pivotal quantile at level {lam.level:.6g} uses the largest of "
                        f"{lam.draws} draws")
    lam_lasso = lasso_lambda(n, 0, xi, log_N=lasso_log_N(d, p, n, config.d_w)).value
    h = config.bandwidth(n)

    keys = [(t, e, a) for t in range(len(taus)) for e in usable for a in range(d)]

    def task(key):
        t, e, a = key
        return _node_task(sample, designs[a], weights[e], taus[t], h, lam.value, lam_lasso,
                          rule, config, key)

    results = ordered_map(task, keys, threads)
    nodes = {(r.t, r.e, r.a): r for r in results}

    T, E = len(taus), len(events)
    stat = np.zeros((T, E, d, d))
    coef = np.zeros((T, E, d, d))
    failed = np.ones((T, E, d), dtype=bool)
    support_adj = np.zeros((T, E, d, d), dtype=bool)
    for (t, e, a), r in nodes.items():
        if r.error is not None:
            warnings.append(f"node {sample.names[a]} tau={taus[t]} event={events[e].label}: {r.error}")
            continue
        failed[t, e, a] = False
        dz = designs[a]
        for b, cols in dz.groups().items():
            coef[t, e, a, b] = r.fit.post.beta[dz.linear_column(b)]
            if rule == "support":
                ratio = np.abs(r.fit.penalized.beta[list(cols)]) * r.fit.loadings[list(cols)]
                cut = config.threshold_scale() * r.fit.lam
                stat[t, e, a, b] = float(ratio.max()) / cut if cut > 0 else float(ratio.max() > 0)
                support_adj[t, e, a, b] = any(c in r.fit.support for c in cols)
        if r.density is not None and r.density.clipped_count:
            warnings.append(f"node {sample.names[a]} tau={taus[t]} event={events[e].label}: "
                            f"{r.density.clipped_count} density values floored")

    meta = {"rule": rule, "lambda": lam.value, "lambda_level": lam.level,
            "lambda_draws": lam.draws, "seed": config.seed, "bandwidth": h,
            "expansions": list(config.expansions)}
    cv = None
    if rule == "support":
        graph = GraphEstimate(sample.names, taus, tuple(ev.label for ev in events), support_adj,
                              stat, coef, failed, "ci-support", meta)
    else:
        scores = [s for r in results if r.error is None for s in r.scores]
        hyp = {}
        for s_idx, s in enumerate(scores):
            b = designs[s.node].sources[s.column]
            hyp.setdefault((s.tau, s.event, s.node, b), []).append(s_idx)
        tau_index = {tau: t for t, tau in enumerate(taus)}
        hyp_keys = sorted(hyp, key=lambda h_: (tau_index[h_[0]], h_[1], h_[2], h_[3]))
        groups = [tuple(hyp[h_]) for h_ in hyp_keys]
        observed = [max(abs(scores[i].t_stat) for i in g) for g in groups]
        for h_, obs in zip(hyp_keys, observed):
            stat[tau_index[h_[0]], h_[1], h_[2], h_[3]] = obs
        for s in scores:
            b = designs[s.node].sources[s.column]
            if designs[s.node].transforms[s.column] == "linear":
                coef[tau_index[s.tau], s.event, s.node, b] = s.beta_check
        psi = np.column_stack([s.psi for s in scores]) if scores else np.zeros((n, 0))
        cv = bootstrap_cv(psi, groups, config.cv_level, config.b_boot, policy, config.stepdown,
                          observed)
        meta.update({"cv": cv.cv, "cv_sequence": list(cv.sequence), "cv_level": config.cv_level,
                     "lasso_lambda": lam_lasso})
        graph = build_ci_graph(stat, cv.cv, sample.names, taus,
                               tuple(ev.label for ev in events), coef, failed, meta)
    for e in range(E):
        if weights[e] is None:
            graph.adjacency[:, e] = False
    return CiqgmResult(graph, lam, nodes, cv, lam_lasso, warnings)


class ConditionalIndependenceQGM(BaseEstimator):
    """Estimator wrapper around :func:`run_ciqgm`.

    After ``fit``, ``graph_`` holds the :class:`GraphEstimate` and
    ``adjacency_`` the union over the quantile grid for the first event.
    """

    def __init__(self, taus=(0.2, 0.5, 0.8), events=None, expansions=(), graph_rule="score",
                 c_slack=1.1, gamma_level=None, b_penalty=1000, b_boot=500, cv_level=0.95,
                 stepdown=True, random_state=0, n_jobs=1):
        self.taus = taus
        self.events = events
        self.expansions = expansions
        self.graph_rule = graph_rule
        self.c_slack = c_slack
        self.gamma_level = gamma_level
        self.b_penalty = b_penalty
        self.b_boot = b_boot
        self.cv_level = cv_level
        self.stepdown = stepdown
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self) -> QgmConfig:
        events = (EventSpec.trivial(),) if self.events is None else tuple(self.events)
        return QgmConfig(c_slack=self.c_slack, gamma_level=self.gamma_level,
                         b_penalty=self.b_penalty, b_boot=self.b_boot, taus=tuple(self.taus),
                         events=events, expansions=tuple(self.expansions),
                         cv_level=self.cv_level, stepdown=self.stepdown,
                         graph_rule=self.graph_rule, seed=self.random_state, threads=self.n_jobs)

    def fit(self, X, y=None, w=None):
        names = getattr(X, "columns", None)
        names = None if names is None else [str(c) for c in names]
        X = check_array(X)
        sample = SampleMatrix.from_array(X, names, w)
        self.result_ = run_ciqgm(sample, self._config())
        self.graph_ = self.result_.graph
        self.adjacency_ = self.graph_.union(0)
        self.lambda_ = self.result_.lam.value
        self.n_features_in_ = X.shape[1]
        return self

    def get_adjacency(self, tau_index=None, event=0):
        check_is_fitted(self, "graph_")
        if tau_index is None:
            return self.graph_.union(event)
        return self.graph_.adjacency[tau_index, event].copy()
