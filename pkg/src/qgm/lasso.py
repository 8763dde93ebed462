"""Weighted Lasso and post-Lasso for the instrument regressions.

Objective on the mean scale:

    (1/n) sum_i k_i (t_i - r_i' g)^2 + lam * sum_k loadings_k |g_k|

The penalized solve delegates to scikit-learn's coordinate descent after
absorbing the loadings into the columns; the result is then checked (and if
needed polished) against the coordinate-wise subgradient conditions.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso

from .core import DegenerateDesign


class RankDeficientRefit(DegenerateDesign):
    pass


@dataclass(frozen=True)
class LassoFit:
    gamma: np.ndarray  # post-Lasso coefficients
    support: tuple
    residuals: np.ndarray  # weighted residuals k * (t - R gamma)
    loadings_final: np.ndarray
    objective: float  # penalized objective of the pass-2 Lasso solution
    lam: float
    gamma_penalized: np.ndarray = field(repr=False, default=None)
    kkt_gap: float = 0.0
    dropped: tuple = ()  # support columns skipped by the rank check
    passes: int = 2


def lasso_objective(t, R, k, lam, loadings, gamma) -> float:
    r = t - R @ gamma
    return float(np.dot(k, r * r)) / t.shape[0] + lam * float(np.dot(loadings, np.abs(gamma)))


def lasso_kkt_gap(G, c, lam, loadings, gamma) -> float:
    """Largest violation of ``0 in 2(G g - c)_k + lam L_k d|g_k|`` over coordinates."""
    grad = 2.0 * (G @ gamma - c)
    pen = lam * loadings
    nz = gamma != 0
    viol = np.where(nz, np.abs(grad + pen * np.sign(gamma)), np.maximum(0.0, np.abs(grad) - pen))
    return float(viol.max()) if viol.size else 0.0


def _cd_polish(G, c, lam, loadings, gamma, tol, max_sweeps=10000):
    g = gamma.copy()
    diag = np.diag(G)
    for _ in range(max_sweeps):
        delta = 0.0
        for j in range(g.size):
            if diag[j] == 0:
                continue
            rho = c[j] - G[j] @ g + diag[j] * g[j]
            thr = 0.5 * lam * loadings[j]
            new = np.sign(rho) * max(abs(rho) - thr, 0.0) / diag[j]
            delta = max(delta, abs(new - g[j]))
            g[j] = new
        if delta < 1e-15 or lasso_kkt_gap(G, c, lam, loadings, g) <= tol:
            break
    return g


def weighted_lasso(t, R, k, lam: float, loadings, kkt_tol: float = 1e-6):
    """Penalized solve; returns ``(gamma, kkt_gap)``.

    Columns with zero loading or zero variance on the active rows stay at 0.
    """
    t = np.asarray(t, dtype=float)
    R = np.asarray(R, dtype=float)
    k = np.asarray(k, dtype=float)
    loadings = np.asarray(loadings, dtype=float)
    n, p = R.shape
    gamma = np.zeros(p)
    if p == 0:
        return gamma, 0.0
    rows = k > 0
    m = int(rows.sum())
    G = (R.T * k) @ R / n
    c = (R.T * k) @ t / n
    usable = (loadings > 0) & (np.diag(G) > 0)
    if lam == 0 or not usable.any():
        return gamma, lasso_kkt_gap(G, c, lam, loadings, gamma)
    cols = np.flatnonzero(usable)
    Rs = R[np.ix_(rows, cols)] / loadings[cols]
    # (1/n)||.||^2 + lam ||.||_1  ==  (2m/n) [ (1/2m)||.||^2 + (lam n / 2m) ||.||_1 ]
    model = Lasso(alpha=lam * n / (2.0 * m), fit_intercept=False, tol=1e-12,
                  max_iter=100000, selection="cyclic")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model.fit(Rs, t[rows])
    gamma[cols] = model.coef_ / loadings[cols]
    sub = np.ix_(cols, cols)
    gap = lasso_kkt_gap(G, c, lam, loadings, gamma)
    if gap > kkt_tol:
        gamma[cols] = _cd_polish(G[sub], c[cols], lam, loadings[cols], gamma[cols], kkt_tol)
        gap = lasso_kkt_gap(G, c, lam, loadings, gamma)
    return gamma, gap


def _independent_columns(R, support, tol=1e-10):
    """Greedy left-to-right selection of support columns that add rank."""
    kept, dropped = [], []
    for j in support:
        trial = kept + [j]
        A = R[:, trial]
        s = np.linalg.svd(A, compute_uv=False)
        if s.size and s[-1] > tol * max(1.0, s[0]):
            kept = trial
        else:
            dropped.append(j)
    return kept, dropped


def post_lasso(t, R, k, support):
    """Least squares of ``t`` on the ``support`` columns over the active rows."""
    t = np.asarray(t, dtype=float)
    rows = np.asarray(k) > 0
    p = R.shape[1]
    gamma = np.zeros(p)
    support = [int(j) for j in support]
    if len(support) + 2 > rows.sum():
        raise RankDeficientRefit(f"refit needs {len(support) + 2} active rows, have {rows.sum()}")
    Ra = R[rows]
    kept, dropped = _independent_columns(Ra, support)
    if kept:
        sol, *_ = np.linalg.lstsq(Ra[:, kept], t[rows], rcond=None)
        gamma[kept] = sol
    return gamma, tuple(kept), tuple(dropped)


def initial_loadings(t, R, k):
    """Conservative start ``max_i ||f Z_i||_inf * sqrt(E_n[k (f Z_l)^2])``."""
    rows = np.asarray(k) > 0
    n = R.shape[0]
    full = np.column_stack([t, R])[rows]
    row_max = float(np.abs(full).max()) if full.size else 0.0
    return row_max * np.sqrt((np.asarray(k) @ (R * R)) / n)


def refined_loadings(R, k, v):
    """Residual-based loadings ``sqrt(E_n[k R_l^2 v^2])``."""
    n = R.shape[0]
    return np.sqrt((np.asarray(k) * v * v) @ (R * R) / n)


def weighted_post_lasso(t, R, k, lam: float, kkt_tol: float = 1e-6) -> LassoFit:
    """Two-pass weighted post-Lasso of ``t`` on the columns of ``R``.

    Pass 1 uses :func:`initial_loadings`; pass 2 recomputes the loadings from
    the pass-1 post-Lasso residuals.  The pass-2 refit is returned.  If pass-1
    residuals vanish numerically the pass-1 result is kept.
    """
    t = np.asarray(t, dtype=float)
    R = np.asarray(R, dtype=float)
    k = np.asarray(k, dtype=float)
    lam = float(lam)
    load = initial_loadings(t, R, k)
    passes = 0
    result = None
    for _ in range(2):
        gamma_pen, gap = weighted_lasso(t, R, k, lam, load, kkt_tol)
        support = tuple(int(j) for j in np.flatnonzero(gamma_pen))
        if lam == 0:
            support = tuple(range(R.shape[1]))
        gamma, kept, dropped = post_lasso(t, R, k, support)
        v = k * (t - R @ gamma)
        passes += 1
        result = LassoFit(gamma, kept, v, load, lasso_objective(t, R, k, lam, load, gamma_pen),
                          lam, gamma_pen, gap, dropped, passes)
        scale = max(1.0, float(np.sqrt(np.mean(k * t * t))))
        if lam == 0 or np.sqrt(np.mean(v * v)) <= 1e-12 * scale:
            break
        new = refined_loadings(R, k, v)
        # columns whose refined loading vanishes keep the conservative start
        load = np.where(new > 0, new, load)
    return result
