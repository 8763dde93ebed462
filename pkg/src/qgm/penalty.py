"""Penalty-level choosers.

All simulated choosers draw in fixed-size blocks, each block from its own
counter-based stream, so values do not depend on how blocks are scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtri_exp

from .core import DegenerateDesign, RngPolicy, order_statistic, std_normals, uniforms

BLOCK = 250


@dataclass(frozen=True)
class PenaltyChoice:
    value: float
    method: str  # "analytic" | "pivotal" | "bootstrap" | "lasso"
    level: float
    draws: int = 0
    seed: int = 0
    saturated: bool = False


def _blocks(B: int):
    start = 0
    while start < B:
        yield start // BLOCK, min(BLOCK, B - start)
        start += BLOCK


def pivotal_draws(Z, taus, weights, B: int, rng_policy: RngPolicy) -> np.ndarray:
    """Draws of the self-normalised uniform-rank score maximum for one design.

    The uniforms depend only on the draw block, so every node sees the same
    ranks and nodes with identical designs give identical draws.

    Each draw simulates ``U ~ Uniform(0,1)^n`` and returns the sup over the
    quantile grid, events and columns of

        |E_n[k (1{U <= tau} - tau) Z_j]| / (sqrt(tau (1 - tau)) * sqrt(E_n[k Z_j^2]))
    """
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    weights = [np.asarray(k, dtype=float) for k in weights]
    scaled = []
    for k in weights:
        s = np.sqrt((k @ (Z * Z)) / n)
        if np.any(s == 0):
            raise DegenerateDesign("a design column vanishes on an event")
        scaled.append((Z * k[:, None]) / (n * s))
    out = np.empty(B)
    for b, size in _blocks(B):
        U = uniforms(rng_policy.generator("pivotal", b), (n, size))
        best = np.zeros(size)
        for tau in taus:
            S = (U <= tau) - tau
            norm = math.sqrt(tau * (1.0 - tau))
            for M in scaled:
                best = np.maximum(best, np.abs(M.T @ S).max(axis=0) / norm)
        out[b * BLOCK:b * BLOCK + size] = best
    return out


def pivotal_level(xi: float, n_nodes: int, n: int = 1, d_w: int = 0) -> float:
    """Per-node confidence level; the event-family form applies when ``d_w > 0``."""
    if d_w == 0:
        return 1.0 - xi / n_nodes
    return 1.0 - xi / (n_nodes * float(n) ** (1 + 2 * d_w))


def pivotal_lambda(Z_by_node: Sequence, taus, weights, xi: float, B: int,
                   rng_policy: RngPolicy, d_w: int = 0) -> PenaltyChoice:
    """Maximum over nodes of the per-node pivotal quantile.

    ``weights`` is the list of binary event vectors shared by all nodes.
    """
    if B < 100:
        raise ValueError("B must be at least 100")
    if not 0 < xi < 1:
        raise ValueError("xi must lie in (0, 1)")
    n = np.asarray(Z_by_node[0]).shape[0]
    level = pivotal_level(xi, len(Z_by_node), n, d_w)
    value = 0.0
    for Z in Z_by_node:
        draws = pivotal_draws(Z, taus, weights, B, rng_policy)
        value = max(value, order_statistic(draws, level))
    saturated = math.ceil(level * B - 1e-9) >= B
    return PenaltyChoice(value, "pivotal", level, B, rng_policy.master_seed, saturated)


def analytic_lambda0(n: int, n_nodes: int, d_w: int, xi: float, c_slack: float) -> PenaltyChoice:
    """Conservative closed-form pilot level ``c n^{-1/2} 2 (1 + 1/16) sqrt(2 log(...))``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if not 0 < xi < 1:
        raise ValueError("xi must lie in (0, 1)")
    if d_w == 0:
        log_term = math.log(8.0 * n_nodes ** 2 / xi) + 2.0 * (math.log(n) + 1.0)
    else:
        log_term = (math.log(8.0 * n_nodes ** 2 / xi)
                    + 2.0 * d_w * (math.log(n) + 1.0 - math.log(d_w)))
    value = c_slack * n ** -0.5 * 2.0 * (1.0 + 1.0 / 16.0) * math.sqrt(2.0 * log_term)
    return PenaltyChoice(value, "analytic", 1.0 - xi)


def bootstrap_draws(eps_list: Sequence, X_list: Sequence, weights_list: Sequence, B: int,
                    rng_policy: RngPolicy) -> np.ndarray:
    """Draws of ``1.1 max_u max_j |E_n[k g eps_u X_j]| / sqrt(E_n[k eps_u^2 X_j^2])``.

    One Gaussian multiplier vector ``g`` is shared by every ``u`` and ``j``
    within a draw.
    """
    cols = []
    for eps, X, k in zip(eps_list, X_list, weights_list):
        eps = np.asarray(eps, dtype=float)
        X = np.asarray(X, dtype=float)
        k = np.asarray(k, dtype=float)
        M = X * (k * eps)[:, None]
        n = M.shape[0]
        den = np.sqrt(np.mean(M * M, axis=0))
        if np.any(den == 0):
            raise DegenerateDesign("zero residual-weighted loading in bootstrap penalty")
        cols.append(M / (n * den))
    M = np.hstack(cols)
    n = M.shape[0]
    out = np.empty(B)
    for b, size in _blocks(B):
        G = std_normals(rng_policy.generator("bootstrap_lambda", b), (n, size))
        out[b * BLOCK:b * BLOCK + size] = 1.1 * np.abs(M.T @ G).max(axis=0)
    return out


def bootstrap_lambda(eps_list: Sequence, X_list: Sequence, weights_list: Sequence, xi: float,
                     B: int, rng_policy: RngPolicy) -> PenaltyChoice:
    """Multiplier-bootstrap penalty: the ``(1 - xi)``-quantile of :func:`bootstrap_draws`."""
    if not 0 < xi < 1:
        raise ValueError("xi must lie in (0, 1)")
    draws = bootstrap_draws(eps_list, X_list, weights_list, B, rng_policy)
    level = 1.0 - xi
    saturated = math.ceil(level * B - 1e-9) >= B
    return PenaltyChoice(order_statistic(draws, level), "bootstrap", level, B,
                         rng_policy.master_seed, saturated)


def norm_upper_quantile(log_p: float) -> float:
    """``Phi^{-1}(1 - p)`` from ``log p``; stable for astronomically small ``p``."""
    return -float(ndtri_exp(log_p))


def lasso_lambda(n: int, N_n: float, xi: float, log_N: float = None) -> PenaltyChoice:
    """``1.1 n^{-1/2} 2 Phi^{-1}(1 - xi / N_n)``; pass ``log_N`` for huge ``N_n``."""
    if log_N is None:
        if N_n < 1:
            raise ValueError("N_n must be at least 1")
        log_N = math.log(N_n)
    z = norm_upper_quantile(math.log(xi) - log_N)
    return PenaltyChoice(1.1 * n ** -0.5 * 2.0 * z, "lasso", 1.0 - xi)


def lasso_log_N(n_nodes: int, p: int, n: int, d_w: int = 0) -> float:
    """``log(|V| p^2 (p n^3)^{1 + d_w})``; equals ``log(|V| p^3 n^3)`` for ``d_w = 0``."""
    return math.log(n_nodes) + 2 * math.log(p) + (1 + d_w) * (math.log(p) + 3 * math.log(n))
