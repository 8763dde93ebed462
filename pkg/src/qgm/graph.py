"""Directed graph estimates indexed by quantile level and conditioning event."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass
class GraphEstimate:
    """Per ``(tau, event)`` directed adjacency with edge statistics.

    ``adjacency[t, e, a, b]`` is true when ``b`` points into ``a``'s model,
    i.e. ``X_b`` matters for the quantile of ``X_a``.  ``coef[t, e, a, b]``
    is the linear coefficient of ``X_b`` in ``a``'s refitted regression.
    """

    names: tuple
    taus: tuple
    events: tuple  # event labels
    adjacency: np.ndarray
    stat: np.ndarray
    coef: np.ndarray
    failed: np.ndarray = None  # (T, E, d) node failures
    kind: str = "ci"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T, E, d = len(self.taus), len(self.events), len(self.names)
        shape = (T, E, d, d)
        self.adjacency = np.asarray(self.adjacency, dtype=bool).reshape(shape)
        self.stat = np.asarray(self.stat, dtype=float).reshape(shape)
        self.coef = np.asarray(self.coef, dtype=float).reshape(shape)
        if self.failed is None:
            self.failed = np.zeros((T, E, d), dtype=bool)
        self.failed = np.asarray(self.failed, dtype=bool).reshape((T, E, d))
        idx = np.arange(d)
        if self.adjacency[..., idx, idx].any():
            raise ValueError("self-loops are not allowed")

    @classmethod
    def empty(cls, names, taus, events, kind="ci", meta=None) -> "GraphEstimate":
        T, E, d = len(taus), len(events), len(names)
        return cls(tuple(names), tuple(taus), tuple(events), np.zeros((T, E, d, d), bool),
                   np.zeros((T, E, d, d)), np.zeros((T, E, d, d)), None, kind, dict(meta or {}))

    @property
    def d(self) -> int:
        return len(self.names)

    def union(self, event: int = 0, tau_index=None) -> np.ndarray:
        """Union over the quantile grid (or a subset of it) for one event."""
        sel = range(len(self.taus)) if tau_index is None else tau_index
        return np.logical_or.reduce([self.adjacency[t, event] for t in sel])

    def edges(self, t: int, e: int):
        a, b = np.nonzero(self.adjacency[t, e])
        return list(zip(a.tolist(), b.tolist()))

    def edge_count(self, t: int = None, e: int = 0) -> int:
        adj = self.union(e) if t is None else self.adjacency[t, e]
        return int(adj.sum())

    # serialisation -----------------------------------------------------

    def to_dict(self) -> dict:
        graphs = []
        for t, tau in enumerate(self.taus):
            for e, label in enumerate(self.events):
                graphs.append({
                    "tau": tau,
                    "event": label,
                    "edges": [{"from": self.names[b], "to": self.names[a],
                               "stat": float(self.stat[t, e, a, b]),
                               "coef": float(self.coef[t, e, a, b])}
                              for a, b in self.edges(t, e)],
                    "failed_nodes": [self.names[a] for a in np.flatnonzero(self.failed[t, e])],
                })
        unions = []
        for e, label in enumerate(self.events):
            a_idx, b_idx = np.nonzero(self.union(e))
            unions.append({"event": label, "taus": list(self.taus),
                           "edges": [{"from": self.names[b], "to": self.names[a]}
                                     for a, b in zip(a_idx.tolist(), b_idx.tolist())]})
        return {"meta": dict(self.meta, kind=self.kind, nodes=list(self.names)),
                "taus": list(self.taus), "events": list(self.events),
                "graphs": graphs, "unions": unions}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    def edges_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["tau", "event", "from", "to", "stat", "coef"])
        for t, tau in enumerate(self.taus):
            for e, label in enumerate(self.events):
                for a, b in self.edges(t, e):
                    w.writerow([repr(tau), label, self.names[b], self.names[a],
                                repr(float(self.stat[t, e, a, b])),
                                repr(float(self.coef[t, e, a, b]))])
        return buf.getvalue()

    def to_dot(self) -> str:
        """Union over quantiles and events; one line per directed edge."""
        adj = np.logical_or.reduce([self.union(e) for e in range(len(self.events))])
        lines = ["digraph qgm {"]
        for name in self.names:
            lines.append(f'  "{name}";')
        for a, b in zip(*np.nonzero(adj)):
            taus = [str(self.taus[t]) for t in range(len(self.taus))
                    if self.adjacency[t, :, a, b].any()]
            lines.append(f'  "{self.names[b]}" -> "{self.names[a]}" [label="{",".join(taus)}"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
