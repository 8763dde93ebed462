"""Delta-CoVaR networks built from quantile-regression coefficients."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatch


def var_tau(x, tau: float) -> float:
    """Empirical tau-quantile: the order statistic at index ``ceil(n * tau)``."""
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n == 0:
        raise ValueError("var_tau needs at least one observation")
    if not 0 <= tau <= 1:
        raise ValueError("tau must lie in [0, 1]")
    idx = min(max(math.ceil(n * tau - 1e-12), 1), n)
    return float(np.partition(x, idx - 1)[idx - 1])


@dataclass(frozen=True)
class CovarNetwork:
    """``delta[a, b]``: change in ``b``'s tau-quantile when ``a`` moves from its median to its tau-quantile."""

    tau: float
    names: tuple
    delta: np.ndarray
    var_gap: np.ndarray

    @property
    def to_deg(self) -> np.ndarray:
        return self.delta.sum(axis=1)

    @property
    def from_deg(self) -> np.ndarray:
        return self.delta.sum(axis=0)

    @property
    def net(self) -> np.ndarray:
        return self.to_deg - self.from_deg

    @property
    def total(self) -> float:
        return float(self.delta.sum())

    def ranking(self) -> list:
        """Nodes ordered by net contribution, largest first (ties by name order)."""
        order = sorted(range(len(self.names)), key=lambda i: (-self.net[i], i))
        return [(self.names[i], float(self.to_deg[i]), float(self.from_deg[i]), float(self.net[i]))
                for i in order]

    def to_dict(self) -> dict:
        return {"tau": self.tau, "nodes": list(self.names),
                "delta": self.delta.tolist(), "var_gap": self.var_gap.tolist(),
                "to": self.to_deg.tolist(), "from": self.from_deg.tolist(),
                "net": self.net.tolist(), "total": self.total}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def delta_covar_from_matrix(effects, gaps, tau: float, names=None) -> CovarNetwork:
    """``effects[a, b]`` is the slope of ``X_a`` in ``b``'s quantile regression."""
    beta = np.asarray(effects, dtype=float)
    gaps = np.asarray(gaps, dtype=float).ravel()
    d = gaps.size
    if beta.shape != (d, d):
        raise DimensionMismatch(f"coefficient matrix is {beta.shape}, expected ({d}, {d})")
    beta = beta.copy()
    np.fill_diagonal(beta, 0.0)
    names = tuple(names) if names is not None else tuple(f"X{i + 1}" for i in range(d))
    if len(names) != d:
        raise DimensionMismatch("names do not match the coefficient matrix")
    return CovarNetwork(float(tau), names, gaps[:, None] * beta, gaps)


def delta_covar(coefs, sample, tau: float, names=None) -> CovarNetwork:
    """Network at ``tau`` from per-node coefficients and the data.

    ``coefs[a, b]`` is the coefficient of ``X_b`` in node ``a``'s regression
    (the layout of :class:`GraphEstimate.coef`), zero where unselected.
    """
    values = getattr(sample, "values", sample)
    values = np.asarray(values, dtype=float)
    if names is None:
        names = getattr(sample, "names", None)
    coefs = np.asarray(coefs, dtype=float)
    d = values.shape[1]
    if coefs.shape != (d, d):
        raise DimensionMismatch(f"coefficients are {coefs.shape}, data has {d} columns")
    gaps = np.array([var_tau(values[:, a], tau) - var_tau(values[:, a], 0.5) for a in range(d)])
    return delta_covar_from_matrix(coefs.T, gaps, tau, names)


def networks_from_graph(graph, sample, event: int = 0) -> list:
    """One network per quantile level of a fitted graph."""
    return [delta_covar(graph.coef[t, event], sample, tau, graph.names)
            for t, tau in enumerate(graph.taus)]


def ranking_csv(networks) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["tau", "node", "to", "from", "net"])
    for net in networks:
        for name, to, frm, nt in net.ranking():
            w.writerow([repr(net.tau), name, repr(to), repr(frm), repr(nt)])
    return buf.getvalue()
