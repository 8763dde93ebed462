"""Data-generating processes, true graphs, closed-form oracles and scoring."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky
from scipy.special import ndtri

from .core import DimensionMismatch, QgmConfig, QgmError, RngPolicy, SampleMatrix, ordered_map, std_normals


class IndivisibleD(QgmError, ValueError):
    pass


class NotPositiveDefinite(QgmError):
    pass


class CholeskyFailure(QgmError):
    pass


@dataclass(frozen=True)
class TrueGraph:
    d: int
    edges: frozenset  # undirected pairs (i, j) with i < j

    @property
    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.d, self.d), dtype=bool)
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = True
        return adj

    @classmethod
    def from_edges(cls, d: int, edges) -> "TrueGraph":
        norm = set()
        for i, j in edges:
            if i == j:
                raise ValueError("self-loops are not allowed")
            norm.add((min(i, j), max(i, j)))
        return cls(d, frozenset(norm))


def hub_group_size(d: int) -> int:
    return 10 if d < 20 else 20


def gen_hub_graph(d: int) -> TrueGraph:
    """Disjoint star graphs on consecutive blocks; the first node of a block is its hub."""
    size = hub_group_size(d)
    if d <= 0 or d % size:
        raise IndivisibleD(f"d={d} is not a multiple of the group size {size}")
    edges = [(g, g + m) for g in range(0, d, size) for m in range(1, size)]
    return TrueGraph.from_edges(d, edges)


def make_precision(graph: TrueGraph):
    """``D [A + (|lambda_min(A)| + 0.2) I] D`` with 0.3 on edges; returns ``(Theta, Sigma)``.

    ``D`` is 1 on the first ``ceil(d/2)`` coordinates and 1.5 on the rest.
    """
    d = graph.d
    A = 0.3 * graph.adjacency.astype(float)
    lam_min = float(np.linalg.eigvalsh(A)[0]) if d else 0.0
    inner = A + (abs(lam_min) + 0.2) * np.eye(d)
    D = np.ones(d)
    D[math.ceil(d / 2):] = 1.5
    theta = inner * np.outer(D, D)
    if np.linalg.eigvalsh(theta)[0] < 0.2 * D.min() ** 2 - 1e-10:
        raise NotPositiveDefinite("precision matrix is not positive definite")
    try:
        cf = cho_factor(theta, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from None
    sigma = cho_solve(cf, np.eye(d))
    sigma = 0.5 * (sigma + sigma.T)
    return theta, sigma


def ar1_covariance(d: int, rho: float) -> np.ndarray:
    idx = np.arange(d)
    return rho ** np.abs(np.subtract.outer(idx, idx))


def sample_mvn(sigma, n: int, seed, names=None) -> SampleMatrix:
    """Rows ``L g`` with ``L L' = Sigma`` and inverse-CDF standard normals ``g``.

    ``seed`` is an int or a generator.
    """
    sigma = np.asarray(sigma, dtype=float)
    try:
        L = cholesky(sigma, lower=True)
    except np.linalg.LinAlgError as exc:
        raise CholeskyFailure(str(exc)) from None
    rng = seed if isinstance(seed, np.random.Generator) else RngPolicy(int(seed)).generator("data")
    g = std_normals(rng, (n, sigma.shape[0]))
    return SampleMatrix.from_array(g @ L.T, names)


def gen_nongaussian_iso(n: int, d: int, seed):
    """``X = (W_1..W_{d-1}, Y)`` with ``Y = -sqrt(2/(3pi-2)) + sqrt(pi/(3pi-2)) W_{d-1}^2 |W_d|``.

    ``Y`` has mean 0 and variance 1 and is uncorrelated with every ``W_j``,
    yet depends on ``W_{d-1}``.  The true graph has the single edge between
    the last two coordinates.
    """
    if d < 3:
        raise ValueError("d must be at least 3")
    rng = seed if isinstance(seed, np.random.Generator) else RngPolicy(int(seed)).generator("data")
    W = std_normals(rng, (n, d))
    c0 = math.sqrt(2.0 / (3.0 * math.pi - 2.0))
    c1 = math.sqrt(math.pi / (3.0 * math.pi - 2.0))
    X = W.copy()
    X[:, d - 1] = -c0 + c1 * W[:, d - 2] ** 2 * np.abs(W[:, d - 1])
    return SampleMatrix.from_array(X), TrueGraph.from_edges(d, [(d - 2, d - 1)])


def gaussian_oracle_coefs(sigma, a: int, tau: float, mu=None):
    """Intercept and slopes of the linear conditional quantile of ``X_a`` given the rest."""
    sigma = np.asarray(sigma, dtype=float)
    d = sigma.shape[0]
    mu = np.zeros(d) if mu is None else np.asarray(mu, dtype=float)
    theta = np.linalg.inv(sigma)
    others = [j for j in range(d) if j != a]
    slopes = -theta[a, others] / theta[a, a]
    intercept = float(ndtri(tau)) / math.sqrt(theta[a, a]) + mu[a] - float(slopes @ mu[others])
    return intercept, slopes


# ---------------------------------------------------------------------------
# scoring


def fp_fn(estimated, truth: TrueGraph, directed_count: bool = True):
    """False positives and negatives of a directed estimate against an undirected truth.

    With ``directed_count`` each true edge counts in both directions.
    Without it, the estimate is symmetrised and edges are counted once.
    """
    est = np.asarray(estimated, dtype=bool)
    if est.shape != (truth.d, truth.d):
        raise DimensionMismatch(f"estimate is {est.shape}, truth has d={truth.d}")
    tru = truth.adjacency
    off = ~np.eye(truth.d, dtype=bool)
    if directed_count:
        fp = int((est & ~tru & off).sum())
        fn = int((tru & ~est).sum())
        return fp, fn
    und = (est | est.T) & off
    upper = np.triu(np.ones_like(und), 1)
    fp = int((und & ~tru & upper).sum())
    fn = int((tru & ~und & upper).sum())
    return fp, fn


def undirected_extra(fp_directed: int) -> int:
    """Extra undirected links implied by a doubled false-positive count."""
    return fp_directed // 2


# ---------------------------------------------------------------------------
# simulation harness

DESIGNS = ("hub", "null", "nongauss", "gauss-ar")
METHODS = ("support", "ci", "p")


def simulate_design(design: str, n: int, d: int, rng: np.random.Generator, rho: float = 0.5):
    """One data set and its true graph."""
    if design == "hub":
        graph = gen_hub_graph(d)
        _, sigma = make_precision(graph)
        return sample_mvn(sigma, n, rng), graph
    if design == "null":
        return sample_mvn(np.eye(d), n, rng), TrueGraph(d, frozenset())
    if design == "gauss-ar":
        edges = [(j, j + 1) for j in range(d - 1)] if rho != 0 else []
        return sample_mvn(ar1_covariance(d, rho), n, rng), TrueGraph.from_edges(d, edges)
    if design == "nongauss":
        return gen_nongaussian_iso(n, d, rng)
    raise ValueError(f"unknown design {design!r}; choose from {DESIGNS}")


def estimate_graph(sample: SampleMatrix, method: str, config: QgmConfig):
    """Union-over-quantiles adjacency for the first event, plus warnings."""
    if method == "p":
        from .pqgm import run_pqgm
        res = run_pqgm(sample, config, threads=1)
    elif method in ("support", "ci"):
        from .ciqgm import run_ciqgm
        res = run_ciqgm(sample, config, rule="support" if method == "support" else "score",
                        threads=1)
    else:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    return res.graph, res.warnings


@dataclass(frozen=True)
class RepResult:
    rep: int
    method: str
    fp: int
    fn: int
    edges: int
    target_found: Optional[bool] = None
    failed_nodes: int = 0


def run_replication(design: str, n: int, d: int, rep: int, method: str, config: QgmConfig,
                    rho: float = 0.5) -> RepResult:
    policy = RngPolicy(config.seed)
    rng = policy.generator("simulate", rep)
    sample, truth = simulate_design(design, n, d, rng, rho)
    rep_cfg = config.replace(seed=policy.child("simulate", rep, 1).master_seed)
    graph, _ = estimate_graph(sample, method, rep_cfg)
    est = graph.union(0)
    fp, fn = fp_fn(est, truth, directed_count=True)
    target = None
    if design == "nongauss":
        target = bool(est[d - 1, d - 2] or est[d - 2, d - 1])
    return RepResult(rep, method, fp, fn, int(est.sum()), target, int(graph.failed.any(axis=(0, 1)).sum()))


def simulation_config(config: QgmConfig, n: int) -> QgmConfig:
    """Simulation protocol: unless set explicitly, cut coefficients at ``lam / n``
    and use level ``0.1`` for the penalty quantile."""
    changes = {}
    if config.threshold_factor is None:
        changes["threshold_factor"] = 1.0 / n
    if config.gamma_level is None:
        changes["gamma_level"] = 0.1
    return config.replace(**changes) if changes else config


def run_simulation(design: str, n: int, d: int, reps: int, config: QgmConfig,
                   method: str = "support", threads: int = 1, rho: float = 0.5) -> list:
    """Replications in parallel; each has its own data and estimation streams."""
    config = simulation_config(config, n)
    if reps < 1:
        raise ValueError("reps must be positive")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if design not in DESIGNS:
        raise ValueError(f"unknown design {design!r}; choose from {DESIGNS}")
    return ordered_map(lambda r: run_replication(design, n, d, r, method, config, rho),
                       range(reps), threads)


def table_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rep", "method", "FP", "FN", "edges", "target_found", "failed_nodes"])
    for r in results:
        w.writerow([r.rep, r.method, r.fp, r.fn, r.edges,
                    "" if r.target_found is None else int(r.target_found), r.failed_nodes])
    return buf.getvalue()


def _mean_sd(x):
    x = np.asarray(x, dtype=float)
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return float(np.mean(x)), sd


def summary_rows(results) -> list:
    """Two rows per method, mean then sd, as in the published tables."""
    rows = []
    for method in sorted({r.method for r in results}):
        rs = [r for r in results if r.method == method]
        fp = _mean_sd([r.fp for r in rs])
        fn = _mean_sd([r.fn for r in rs])
        hit = [r.target_found for r in rs if r.target_found is not None]
        rate = (float(np.mean(hit)), 0.0) if hit else (None, None)
        rows.append({"method": method, "stat": "mean", "FP": fp[0], "FN": fn[0],
                     "target_rate": rate[0], "reps": len(rs)})
        rows.append({"method": method, "stat": "sd", "FP": fp[1], "FN": fn[1],
                     "target_rate": None, "reps": len(rs)})
    return rows


def summary_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "stat", "FP", "FN", "target_rate", "reps"])
    for row in summary_rows(results):
        w.writerow([row["method"], row["stat"], f"{row['FP']:.6g}", f"{row['FN']:.6g}",
                    "" if row["target_rate"] is None else f"{row['target_rate']:.6g}",
                    row["reps"]])
    return buf.getvalue()
