"""Weighted, loading-scaled l1-penalized quantile regression.

The objective is

    (1/n) sum_i k_i rho_tau(y_i - x_i' b) + lam * sum_j loadings_j |b_j|

with binary row weights ``k``.  Coordinates with zero loading (the intercept)
are unpenalized.  Problems are solved as linear programs by HiGHS; every fit
carries a first-order optimality certificate (``kkt_gap``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .core import QgmError, check_loss, column_scales

TIE_TOL = 1e-10


class SolverError(QgmError):
    pass


class Unbounded(SolverError):
    pass


class MaxIterations(SolverError):
    def __init__(self, msg, fit=None):
        super().__init__(msg)
        self.fit = fit


@dataclass(frozen=True)
class QrProblem:
    y: np.ndarray
    X: np.ndarray
    tau: float
    lam: float = 0.0
    loadings: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None
    support: Optional[tuple] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).reshape(-1)
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise ValueError("X must be n x p with n = len(y)")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        p = X.shape[1]
        loadings = np.ones(p) if self.loadings is None else np.asarray(self.loadings, dtype=float)
        if loadings.shape != (p,) or not np.all(np.isfinite(loadings)) or np.any(loadings < 0):
            raise ValueError("loadings must be a finite nonnegative p-vector")
        weights = np.ones(y.shape[0]) if self.weights is None else np.asarray(self.weights, dtype=float)
        if weights.shape != y.shape or not np.all((weights == 0) | (weights == 1)):
            raise ValueError("weights must be a binary n-vector")
        if not weights.any():
            raise ValueError("no active rows")
        support = self.support
        if support is not None:
            if self.lam != 0:
                raise ValueError("support restriction requires lam = 0")
            support = tuple(sorted(int(j) for j in support))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "loadings", loadings)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "support", support)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def free_columns(self) -> np.ndarray:
        """Columns allowed to be nonzero."""
        if self.support is None:
            return np.arange(self.p)
        keep = set(self.support) | set(np.flatnonzero(self.loadings == 0).tolist())
        return np.array(sorted(keep), dtype=int)

    def loss(self, beta) -> float:
        r = self.y - self.X @ beta
        return float(np.dot(self.weights, check_loss(r, self.tau))) / self.n

    def objective(self, beta) -> float:
        return self.loss(beta) + self.lam * float(np.dot(self.loadings, np.abs(beta)))


@dataclass(frozen=True)
class QrFit:
    beta: np.ndarray
    objective: float
    residuals: np.ndarray
    support: tuple
    kkt_gap: float
    iterations: int
    loss: float = 0.0
    dual: Optional[np.ndarray] = field(default=None, repr=False)


def kkt_gap(problem: QrProblem, beta, tie_tol: float = TIE_TOL) -> float:
    """Largest per-coordinate distance from 0 to the subdifferential.

    Rows whose residual is within ``tie_tol`` of zero contribute their full
    subgradient interval.  Coordinates fixed at zero by a support restriction
    carry no condition.
    """
    beta = np.asarray(beta, dtype=float)
    y, X, k, tau, n = problem.y, problem.X, problem.weights, problem.tau, problem.n
    r = y - X @ beta
    tie = (k > 0) & (np.abs(r) <= tie_tol * (1.0 + np.abs(y)))
    free = (k > 0) & ~tie
    psi = np.where(r < 0, tau - 1.0, tau) * free
    base = -(X.T @ psi) / n
    Xt = X[tie]
    # the tie term -x * s for s in [tau - 1, tau]
    a, b = -Xt * (tau - 1.0), -Xt * tau
    lo = base + np.minimum(a, b).sum(axis=0) / n
    hi = base + np.maximum(a, b).sum(axis=0) / n
    pen = problem.lam * problem.loadings
    nz = beta != 0
    sgn = np.sign(beta)
    lo = np.where(nz, lo + pen * sgn, lo - pen)
    hi = np.where(nz, hi + pen * sgn, hi + pen)
    dist = np.maximum(0.0, np.maximum(lo, -hi))
    cols = problem.free_columns()
    return float(dist[cols].max()) if cols.size else 0.0


def _lp(problem: QrProblem, cols: np.ndarray, max_iter: Optional[int]):
    k = problem.weights
    rows = np.flatnonzero(k > 0)
    m = rows.size
    n = problem.n
    Xa = problem.X[np.ix_(rows, cols)]
    ya = problem.y[rows]
    load = problem.loadings[cols]
    free = load == 0
    pen_cols = np.flatnonzero(~free)
    # costs are scaled by n to keep them O(1)
    pen = n * problem.lam * load[pen_cols]
    blocks = [sp.csc_matrix(Xa), sp.csc_matrix(-Xa[:, pen_cols]), sp.identity(m, format="csc"),
              -sp.identity(m, format="csc")]
    A = sp.hstack(blocks, format="csc")
    c = np.concatenate([np.where(free, 0.0, n * problem.lam * load), pen,
                        np.full(m, problem.tau), np.full(m, 1.0 - problem.tau)])
    bounds = ([(None, None) if f else (0, None) for f in free]
              + [(0, None)] * (pen_cols.size + 2 * m))
    options = {"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10}
    if max_iter is not None:
        options["maxiter"] = int(max_iter)
    res = linprog(c, A_eq=A, b_eq=ya, bounds=bounds, method="highs-ds", options=options)
    q = cols.size
    if res.x is None:
        return res, None, None
    b = res.x[:q].copy()
    b[pen_cols] -= res.x[q:q + pen_cols.size]
    dual = np.zeros(n)
    if getattr(res, "eqlin", None) is not None and res.eqlin.marginals is not None:
        dual[rows] = res.eqlin.marginals
    return res, b, dual


def _polish(problem: QrProblem, beta: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Re-solve the interpolation system at the LP vertex so ties are exact."""
    k = problem.weights
    r = problem.y - problem.X @ beta
    scale = 1.0 + np.abs(problem.y)
    T = np.flatnonzero((k > 0) & (np.abs(r) <= 1e-7 * scale))
    S = cols[beta[cols] != 0]
    if T.size == 0 or S.size == 0 or T.size < S.size:
        return beta
    A = problem.X[np.ix_(T, S)]
    if np.linalg.matrix_rank(A) < S.size:
        return beta
    sol, *_ = np.linalg.lstsq(A, problem.y[T], rcond=None)
    cand = beta.copy()
    cand[S] = sol
    if problem.objective(cand) <= problem.objective(beta) + 1e-12:
        return cand
    return beta


def solve(problem: QrProblem, kkt_tol: float = 1e-6, max_iter: Optional[int] = None) -> QrFit:
    """Globally minimise the penalized quantile regression objective.

    Raises :class:`MaxIterations` (carrying the best iterate) if the LP
    hits its iteration limit or the certificate cannot be brought below
    ``kkt_tol``.
    """
    cols = problem.free_columns()
    p = problem.p
    res, b, dual = _lp(problem, cols, max_iter)
    if res.status == 3:
        raise Unbounded("quantile regression LP is unbounded")
    if b is None:
        raise SolverError(f"LP solver failed: {res.message}")
    beta = np.zeros(p)
    beta[cols] = b
    gap = kkt_gap(problem, beta)
    if gap > kkt_tol:
        beta = _polish(problem, beta, cols)
        gap = kkt_gap(problem, beta)
    fit = _make_fit(problem, beta, gap, int(getattr(res, "nit", 0)), dual)
    if res.status == 1 or gap > kkt_tol:
        raise MaxIterations(f"no certified optimum (status {res.status}, kkt_gap {gap:.3g})", fit)
    return fit


def _make_fit(problem, beta, gap, nit, dual) -> QrFit:
    r = problem.y - problem.X @ beta
    return QrFit(
        beta=beta,
        objective=problem.objective(beta),
        residuals=r,
        support=tuple(int(j) for j in np.flatnonzero(beta)),
        kkt_gap=gap,
        iterations=nit,
        loss=problem.loss(beta),
        dual=None if dual is None else problem.n * dual,
    )


def refit_on_support(problem: QrProblem, support, kkt_tol: float = 1e-6) -> QrFit:
    """Unpenalized fit restricted to ``support`` plus the unpenalized columns."""
    restricted = QrProblem(problem.y, problem.X, problem.tau, 0.0, problem.loadings,
                           problem.weights, tuple(support))
    return solve(restricted, kkt_tol=kkt_tol)


def threshold_support(beta, level: float, loadings) -> tuple:
    """Penalized coordinates with ``|beta_j| * loadings_j >= level``.

    Zero coefficients and unpenalized coordinates are never returned.
    """
    beta = np.asarray(beta, dtype=float)
    loadings = np.asarray(loadings, dtype=float)
    keep = (beta != 0) & (loadings > 0) & (np.abs(beta) * loadings >= level)
    return tuple(int(j) for j in np.flatnonzero(keep))


class QuantileLassoRegressor(RegressorMixin, BaseEstimator):
    """l1-penalized quantile regression with scale-invariant loadings.

    Parameters
    ----------
    tau : float
        Quantile index.
    lam : float or None
        Penalty level on the mean scale.  ``None`` picks the pivotal level
        ``c_slack * sqrt(tau (1 - tau)) * Lambda(1 - xi)``.
    post_refit : bool
        Refit without penalty on the thresholded support.
    """

    def __init__(self, tau=0.5, lam=None, post_refit=False, xi=0.1, c_slack=1.1,
                 n_draws=1000, kkt_tol=1e-6, random_state=0):
        self.tau = tau
        self.lam = lam
        self.post_refit = post_refit
        self.xi = xi
        self.c_slack = c_slack
        self.n_draws = n_draws
        self.kkt_tol = kkt_tol
        self.random_state = random_state

    def fit(self, X, y, sample_weight=None):
        from .core import RngPolicy
        from .penalty import pivotal_lambda

        X, y = check_X_y(X, y, y_numeric=True)
        n = X.shape[0]
        Z = np.column_stack([np.ones(n), X])
        k = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        loadings = column_scales(Z, k)
        loadings[0] = 0.0
        if self.lam is None:
            choice = pivotal_lambda([Z], [self.tau], [k], self.xi, self.n_draws,
                                    RngPolicy(self.random_state))
            lam = self.c_slack * choice.value * np.sqrt(self.tau * (1 - self.tau))
        else:
            lam = float(self.lam)
        problem = QrProblem(y, Z, self.tau, lam, loadings, k)
        fit = solve(problem, kkt_tol=self.kkt_tol)
        self.lambda_ = lam
        self.penalized_fit_ = fit
        if self.post_refit:
            self.support_ = threshold_support(fit.beta, lam, loadings)
            fit = refit_on_support(problem, self.support_, kkt_tol=self.kkt_tol)
        else:
            self.support_ = tuple(j for j in fit.support if j != 0)
        self.fit_ = fit
        self.intercept_ = float(fit.beta[0])
        self.coef_ = fit.beta[1:].copy()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X)
        return self.intercept_ + X @ self.coef_
