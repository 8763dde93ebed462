"""Shared data model: samples, quantile grids, conditioning events, RNG streams
and the configuration object used by every pipeline."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import ndtri


class QgmError(Exception):
    """Base class for all errors raised by this package."""


class InputError(QgmError, ValueError):
    """Malformed user input (CSV, config, arguments)."""


class MissingConditioningColumn(QgmError):
    pass


class DimensionMismatch(QgmError, ValueError):
    pass


class EventTooSmall(QgmError):
    pass


class ZeroColumn(QgmError):
    pass


class DegenerateDesign(QgmError):
    pass


# ---------------------------------------------------------------------------
# check function and friends


def check_loss(t, tau):
    """Quantile check function ``rho_tau(t) = t * (tau - 1{t <= 0})``."""
    t = np.asarray(t, dtype=float)
    out = t * (tau - (t <= 0))
    return float(out) if out.ndim == 0 else out


def _knight_integral(w, v):
    # closed form of int_0^v (1{w <= z} - 1{w <= 0}) dz
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    pos = np.where(w > 0, np.maximum(0.0, v - w), 0.0)
    neg = np.where(w <= 0, np.maximum(0.0, w - v), 0.0)
    return np.where(v >= 0, pos, neg)


def knight_gap(w, v, tau):
    """Absolute violation of Knight's identity for the check function.

    ``rho(w - v) - rho(w) = -v (tau - 1{w <= 0}) + int_0^v (1{w <= z} - 1{w <= 0}) dz``
    holds exactly, so the returned gap is zero up to rounding.
    """
    w = np.asarray(w, dtype=float)
    v = np.asarray(v, dtype=float)
    lhs = check_loss(w - v, tau) - check_loss(w, tau)
    rhs = -v * (tau - (w <= 0)) + _knight_integral(w, v)
    gap = np.abs(lhs - rhs)
    return float(gap) if gap.ndim == 0 else gap


def weighted_column_scale(x, k=None) -> float:
    """Root of ``(1/n) sum_i k_i x_i^2``; raises :class:`ZeroColumn` when it vanishes."""
    x = np.asarray(x, dtype=float)
    k = np.ones_like(x) if k is None else np.asarray(k, dtype=float)
    if not k.any():
        raise ValueError("at least one weight must be 1")
    s = math.sqrt(float(np.dot(k, x * x)) / x.shape[0])
    if s == 0.0:
        raise ZeroColumn("column is identically zero on the selected rows")
    return s


def column_scales(Z, k=None) -> np.ndarray:
    """Vectorised :func:`weighted_column_scale` without the zero check."""
    Z = np.asarray(Z, dtype=float)
    if k is None:
        return np.sqrt(np.mean(Z * Z, axis=0))
    return np.sqrt((k @ (Z * Z)) / Z.shape[0])


# ---------------------------------------------------------------------------
# data model


@dataclass(frozen=True)
class SampleMatrix:
    values: np.ndarray
    names: tuple
    w: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise InputError("sample values must be a 2-d array")
        n, d = values.shape
        if n < 2 or d < 2:
            raise InputError(f"need n >= 2 and d >= 2, got n={n}, d={d}")
        if not np.all(np.isfinite(values)):
            i, j = np.argwhere(~np.isfinite(values))[0]
            raise InputError(f"non-finite value at row {i}, column {j}")
        names = tuple(str(s) for s in self.names)
        if len(names) != d:
            raise InputError(f"{len(names)} names for {d} columns")
        if len(set(names)) != d:
            raise InputError("column names must be unique")
        w = self.w
        if w is not None:
            w = np.array(w, dtype=float).reshape(-1)
            if w.shape[0] != n:
                raise InputError("conditioning column length differs from n")
            if not np.all(np.isfinite(w)):
                raise InputError("conditioning column has non-finite entries")
            w.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "w", w)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_array(cls, values, names=None, w=None) -> "SampleMatrix":
        values = np.asarray(values, dtype=float)
        if names is None:
            names = [f"X{j + 1}" for j in range(values.shape[1])]
        return cls(values, tuple(names), w)

    @classmethod
    def from_csv(cls, path, w_column: Optional[str] = None) -> "SampleMatrix":
        """Read a comma-separated file with a header row.

        ``w_column`` names the conditioning column; it is removed from the
        node set.
        """
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise InputError(f"{path}: empty file")
        header = [h.strip() for h in rows[0]]
        data = []
        for lineno, row in enumerate(rows[1:], start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise InputError(
                    f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            parsed = []
            for col, cell in zip(header, row):
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise InputError(
                        f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r}") from None
            data.append(parsed)
        if not data:
            raise InputError(f"{path}: no data rows")
        arr = np.array(data)
        bad = np.argwhere(~np.isfinite(arr))
        if bad.size:
            i, j = bad[0]
            raise InputError(f"{path}: row {i + 2}, column {header[j]!r}: non-finite value")
        w = None
        if w_column is not None:
            if w_column not in header:
                raise InputError(f"{path}: conditioning column {w_column!r} not in header")
            jw = header.index(w_column)
            w = arr[:, jw]
            arr = np.delete(arr, jw, axis=1)
            header = header[:jw] + header[jw + 1:]
        return cls(arr, tuple(header), w)

    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values).tobytes())
        h.update("\x1f".join(self.names).encode())
        if self.w is not None:
            h.update(np.ascontiguousarray(self.w).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class TauGrid:
    taus: tuple

    def __post_init__(self):
        taus = tuple(float(t) for t in self.taus)
        if not taus:
            raise InputError("quantile grid is empty")
        for t in taus:
            if not 0.0 < t < 1.0:
                raise InputError(f"quantile index {t} outside (0, 1)")
        if any(b <= a for a, b in zip(taus, taus[1:])):
            raise InputError("quantile grid must be strictly increasing (no duplicates)")
        object.__setattr__(self, "taus", taus)

    def __iter__(self):
        return iter(self.taus)

    def __len__(self):
        return len(self.taus)

    @property
    def tau_min(self) -> float:
        return self.taus[0]

    @property
    def tau_max(self) -> float:
        return self.taus[-1]


@dataclass(frozen=True)
class EventSpec:
    """Indicator conditioning event on the column ``W``.

    ``kind`` is ``"trivial"``, ``"lower"`` (``W <= threshold``) or
    ``"interval"`` (``lo <= W <= hi``).  A lower-tail event may be given by
    a quantile level of ``W`` instead of a threshold; it is resolved against
    the sample with :meth:`resolve`.
    """

    kind: str = "trivial"
    threshold: Optional[float] = None
    lo: Optional[float] = None
    hi: Optional[float] = None
    quantile: Optional[float] = None
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("trivial", "lower", "interval"):
            raise InputError(f"unknown event kind {self.kind!r}")
        if self.kind == "lower" and self.threshold is None and self.quantile is None:
            raise InputError("lower-tail event needs a threshold or a quantile")
        if self.kind == "interval":
            if self.lo is None or self.hi is None or self.lo > self.hi:
                raise InputError("interval event needs lo <= hi")
        if not self.label:
            object.__setattr__(self, "label", self._default_label())

    def _default_label(self) -> str:
        if self.kind == "trivial":
            return "trivial"
        if self.kind == "lower":
            if self.threshold is None:
                return f"lower:q={self.quantile:g}"
            return f"lower:{self.threshold:g}"
        return f"interval:{self.lo:g},{self.hi:g}"

    @classmethod
    def trivial(cls) -> "EventSpec":
        return cls("trivial")

    @classmethod
    def lower_tail(cls, threshold: float, label: str = "") -> "EventSpec":
        return cls("lower", threshold=float(threshold), label=label)

    @classmethod
    def interval(cls, lo: float, hi: float, label: str = "") -> "EventSpec":
        return cls("interval", lo=float(lo), hi=float(hi), label=label)

    def resolve(self, w: Optional[np.ndarray]) -> "EventSpec":
        """Turn a quantile-level lower-tail event into a threshold event."""
        if self.kind != "lower" or self.threshold is not None:
            return self
        if w is None:
            raise MissingConditioningColumn(f"event {self.label!r} needs a conditioning column")
        ws = np.sort(np.asarray(w, dtype=float))
        k = min(max(math.ceil(self.quantile * ws.size - 1e-9), 1), ws.size)
        return dataclasses.replace(self, threshold=float(ws[k - 1]))

    def indicator(self, w: Optional[np.ndarray], n: int) -> np.ndarray:
        if self.kind == "trivial":
            return np.ones(n)
        if w is None:
            raise MissingConditioningColumn(f"event {self.label!r} needs a conditioning column")
        w = np.asarray(w, dtype=float)
        if self.kind == "lower":
            if self.threshold is None:
                return self.resolve(w).indicator(w, n)
            return (w <= self.threshold).astype(float)
        return ((w >= self.lo) & (w <= self.hi)).astype(float)

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "label": self.label}
        for key in ("threshold", "lo", "hi", "quantile"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out

    @classmethod
    def from_dict(cls, obj) -> "EventSpec":
        if isinstance(obj, str):
            return parse_events(obj)[0]
        obj = dict(obj)
        kind = obj.pop("kind", "trivial")
        allowed = {"threshold", "lo", "hi", "quantile", "label"}
        extra = set(obj) - allowed
        if extra:
            raise InputError(f"unknown event fields {sorted(extra)}")
        return cls(kind, **obj)


def parse_events(text: str) -> list:
    """Parse the command-line event syntax ``trivial`` or ``lower:q1,q2,...``.

    The ``lower`` values are quantile levels of the conditioning column.
    """
    text = text.strip()
    if text == "trivial":
        return [EventSpec.trivial()]
    if text.startswith("lower:"):
        try:
            qs = [float(s) for s in text[len("lower:"):].split(",") if s.strip()]
        except ValueError:
            raise InputError(f"cannot parse events {text!r}") from None
        if not qs:
            raise InputError("lower: needs at least one quantile level")
        for q in qs:
            if not 0.0 < q <= 1.0:
                raise InputError(f"event quantile level {q} outside (0, 1]")
        return [EventSpec("lower", quantile=q) for q in qs]
    raise InputError(f"cannot parse events {text!r}; expected 'trivial' or 'lower:<q1,q2,...>'")


def event_weights(spec: EventSpec, sample: SampleMatrix, d_effective: int = 0):
    """Binary row weights for ``spec`` and the size of the selected subsample.

    Raises :class:`EventTooSmall` when fewer than ``d_effective + 2`` rows are
    selected.
    """
    k = spec.indicator(sample.w, sample.n)
    m = int(k.sum())
    if m < d_effective + 2:
        raise EventTooSmall(
            f"event {spec.label!r} selects {m} rows; need at least {d_effective + 2}")
    return k, m


# ---------------------------------------------------------------------------
# random streams

PURPOSES = {
    "pivotal": 1,
    "bootstrap_lambda": 2,
    "bootstrap_cv": 3,
    "simulate": 4,
    "data": 5,
}


def _key_int(part) -> int:
    if isinstance(part, (bool, np.bool_)):
        return int(part)
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError("task key components must be nonnegative")
        return int(part)
    if isinstance(part, str):
        if part in PURPOSES:
            return PURPOSES[part]
        return int.from_bytes(hashlib.blake2b(part.encode(), digest_size=8).digest(), "little")
    raise TypeError(f"unsupported task key component {part!r}")


@dataclass(frozen=True)
class RngPolicy:
    """Counter-based stream derivation.

    Every task gets a Philox generator seeded from ``(master_seed, task_key)``,
    so draws do not depend on scheduling or thread count.
    """

    master_seed: int = 0

    def __post_init__(self):
        seed = int(self.master_seed)
        if not 0 <= seed < 2 ** 64:
            raise InputError("master seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "master_seed", seed)

    def generator(self, *task_key) -> np.random.Generator:
        ss = np.random.SeedSequence(self.master_seed, spawn_key=tuple(_key_int(p) for p in task_key))
        return np.random.Generator(np.random.Philox(ss))

    def child(self, *task_key) -> "RngPolicy":
        """A policy whose master seed is derived from this one."""
        gen = self.generator(*task_key)
        return RngPolicy(int(gen.integers(0, 2 ** 63)))


def uniforms(rng: np.random.Generator, size) -> np.ndarray:
    """Uniforms on the open interval (0, 1) built from 53-bit integers."""
    return (rng.integers(0, 2 ** 53, size=size, dtype=np.int64) + 0.5) / 2.0 ** 53


def std_normals(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normals by the inverse-CDF method."""
    return ndtri(uniforms(rng, size))


# ---------------------------------------------------------------------------
# configuration

EXPANSIONS = ("square", "abs")
GRAPH_RULES = ("score", "support")


@dataclass(frozen=True)
class QgmConfig:
    c_slack: float = 1.1
    gamma_level: Optional[float] = None  # None -> 0.1 / log(n)
    b_penalty: int = 1000
    b_boot: int = 500
    bandwidth_const: float = 1.0
    density_floor: float = 1e-4
    kkt_tol: float = 1e-6
    alpha_grid_points: int = 401
    taus: tuple = (0.2, 0.5, 0.8)
    events: tuple = field(default_factory=lambda: (EventSpec.trivial(),))
    expansions: tuple = ()
    cv_level: float = 0.95
    stepdown: bool = True
    d_w: int = 0
    graph_rule: str = "score"
    threshold_factor: Optional[float] = None  # None -> 1 (cut at the penalty level)
    seed: int = 0
    threads: int = 1
    w_column: Optional[str] = None

    def __post_init__(self):
        if not self.c_slack > 1:
            raise InputError("c_slack must exceed 1")
        if self.gamma_level is not None and not 0 < self.gamma_level < 1:
            raise InputError("gamma_level must lie in (0, 1)")
        if self.b_penalty < 100 or self.b_boot < 100:
            raise InputError("b_penalty and b_boot must be at least 100")
        if self.bandwidth_const <= 0 or self.density_floor <= 0 or self.kkt_tol <= 0:
            raise InputError("bandwidth_const, density_floor and kkt_tol must be positive")
        if self.alpha_grid_points < 2:
            raise InputError("alpha_grid_points must be at least 2")
        if not 0 < self.cv_level < 1:
            raise InputError("cv_level must lie in (0, 1)")
        if self.d_w < 0:
            raise InputError("d_w must be nonnegative")
        if self.graph_rule not in GRAPH_RULES:
            raise InputError(f"graph_rule must be one of {GRAPH_RULES}")
        if self.threshold_factor is not None and not self.threshold_factor >= 0:
            raise InputError("threshold_factor must be nonnegative")
        if self.threads < 1:
            raise InputError("threads must be positive")
        exp = tuple(self.expansions)
        for e in exp:
            if e not in EXPANSIONS:
                raise InputError(f"unknown expansion {e!r}; choose from {EXPANSIONS}")
        events = tuple(e if isinstance(e, EventSpec) else EventSpec.from_dict(e) for e in self.events)
        if not events:
            raise InputError("at least one event is required")
        object.__setattr__(self, "taus", TauGrid(tuple(self.taus)).taus)
        object.__setattr__(self, "events", events)
        object.__setattr__(self, "expansions", exp)
        RngPolicy(self.seed)

    @property
    def tau_grid(self) -> TauGrid:
        return TauGrid(self.taus)

    def gamma(self, n: int) -> float:
        return 0.1 / math.log(n) if self.gamma_level is None else self.gamma_level

    def threshold_scale(self) -> float:
        return 1.0 if self.threshold_factor is None else float(self.threshold_factor)

    def bandwidth(self, n: int) -> float:
        taus = self.taus
        return min(self.bandwidth_const * n ** (-1.0 / 6.0), taus[0] / 2.0, (1.0 - taus[-1]) / 2.0)

    def replace(self, **changes) -> "QgmConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["taus"] = list(self.taus)
        out["events"] = [e.to_dict() for e in self.events]
        out["expansions"] = list(self.expansions)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "QgmConfig":
        obj = dict(obj)
        aliases = {"B_penalty": "b_penalty", "B_boot": "b_boot", "tau_grid": "taus"}
        for old, new in aliases.items():
            if old in obj:
                obj[new] = obj.pop(old)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise InputError(f"unknown config fields {sorted(unknown)}")
        if "events" in obj:
            ev = obj["events"]
            if isinstance(ev, str):
                obj["events"] = tuple(parse_events(ev))
            else:
                obj["events"] = tuple(EventSpec.from_dict(e) for e in ev)
        for key in ("taus", "expansions"):
            if key in obj:
                obj[key] = tuple(obj[key])
        try:
            return cls(**obj)
        except TypeError as exc:
            raise InputError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "QgmConfig":
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise InputError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj)


def resolve_events(events: Iterable[EventSpec], sample: SampleMatrix) -> tuple:
    return tuple(e.resolve(sample.w) if e.kind == "lower" else e for e in events)


def order_statistic(draws: Sequence[float], level: float) -> float:
    """Empirical ``level``-quantile as the ``ceil(level * B)``-th order statistic."""
    x = np.sort(np.asarray(draws, dtype=float))
    B = x.size
    k = min(max(math.ceil(level * B - 1e-9), 1), B)
    return float(x[k - 1])


def resolve_threads(threads: Optional[int] = None) -> int:
    """Explicit value, else ``QGM_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get("QGM_THREADS", "").strip()
        threads = int(env) if env else 1
    return max(1, int(threads))


def ordered_map(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]`` evaluated on a thread pool; order preserved."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
