"""Command-line entry point: ``qgm estimate-ci | estimate-p | simulate``."""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__
from .core import InputError, QgmConfig, QgmError, SampleMatrix, parse_events, resolve_threads

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PARTIAL = 3


def _parse_taus(text: str) -> tuple:
    try:
        return tuple(float(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise InputError(f"cannot parse --tau {text!r}") from None


def build_config(args) -> QgmConfig:
    """Config file (if any) overridden by explicit flags."""
    cfg = QgmConfig.from_json(args.config) if getattr(args, "config", None) else QgmConfig()
    changes = {}
    if getattr(args, "tau", None):
        changes["taus"] = _parse_taus(args.tau)
    if getattr(args, "events", None):
        changes["events"] = tuple(parse_events(args.events))
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "w_column", None):
        changes["w_column"] = args.w_column
    if getattr(args, "rule", None):
        changes["graph_rule"] = args.rule
    if getattr(args, "expansions", None):
        changes["expansions"] = tuple(s for s in args.expansions.split(",") if s)
    return cfg.replace(**changes) if changes else cfg


def _write(out: Path, name: str, text: str, written: dict):
    path = out / name
    path.write_text(text, encoding="utf-8")
    written[name] = hashlib.sha256(text.encode("utf-8")).hexdigest()


def _manifest(command, argv, config, digest, start, warnings, written, status):
    return {
        "command": command,
        "argv": list(argv),
        "config": config.to_dict() if config is not None else None,
        "master_seed": config.seed if config is not None else None,
        "input_digest": digest,
        "version": __version__,
        "wall_time": round(time.time() - start, 3),
        "status": status,
        "warnings": list(warnings),
        "outputs": written,
    }


def _estimate(args, kind: str, argv) -> int:
    start = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written, warnings = {}, []
    config, digest = None, None
    try:
        config = build_config(args)
        sample = SampleMatrix.from_csv(args.data, w_column=config.w_column)
        digest = sample.digest()
        threads = resolve_threads(args.threads)
        if kind == "ci":
            from .ciqgm import run_ciqgm
            result = run_ciqgm(sample, config, threads=threads)
        else:
            from .pqgm import run_pqgm
            result = run_pqgm(sample, config, threads=threads)
    except (QgmError, ValueError, OSError) as exc:
        print(f"qgm: error: {exc}", file=sys.stderr)
        _write(out, "manifest.json",
               json.dumps(_manifest(f"estimate-{kind}", argv, config, digest, start,
                                    [str(exc)], written, "input-error"), indent=2) + "\n", {})
        return EXIT_INPUT
    graph = result.graph
    warnings.extend(result.warnings)
    _write(out, "graph.json", graph.to_json(), written)
    _write(out, "edges.csv", graph.edges_csv(), written)
    if args.dot:
        _write(out, "graph.dot", graph.to_dot(), written)
    if kind == "p" and args.covar:
        from .covar import networks_from_graph, ranking_csv
        nets = [net for e in range(len(graph.events)) for net in networks_from_graph(graph, sample, e)]
        _write(out, "covar.csv", ranking_csv(nets), written)
        _write(out, "covar.json",
               json.dumps([n.to_dict() for n in nets], indent=2) + "\n", written)
    partial = bool(graph.failed.any())
    status = "partial" if partial else "ok"
    _write(out, "manifest.json",
           json.dumps(_manifest(f"estimate-{kind}", argv, config, digest, start, warnings,
                                dict(written), status), indent=2) + "\n", {})
    for w in warnings:
        print(f"qgm: warning: {w}", file=sys.stderr)
    return EXIT_PARTIAL if partial else EXIT_OK


def _simulate(args, argv) -> int:
    from .simgen import run_simulation, simulation_config, summary_csv, table_csv

    start = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    config = None
    try:
        config = build_config(args)
        if args.design == "nongauss" and not config.expansions and not args.expansions:
            config = config.replace(expansions=("square", "abs"))
        if args.n < 2 or args.d < 2 or args.reps < 1:
            raise InputError("need n >= 2, d >= 2 and reps >= 1")
        results = run_simulation(args.design, args.n, args.d, args.reps, config,
                                 method=args.method, threads=resolve_threads(args.threads),
                                 rho=args.rho)
    except (QgmError, ValueError) as exc:
        print(f"qgm: error: {exc}", file=sys.stderr)
        _write(out, "manifest.json",
               json.dumps(_manifest("simulate", argv, config, None, start, [str(exc)], written,
                                    "input-error"), indent=2) + "\n", {})
        return EXIT_INPUT
    _write(out, "table.csv", table_csv(results), written)
    _write(out, "summary.csv", summary_csv(results), written)
    partial = any(r.failed_nodes for r in results)
    effective = simulation_config(config, args.n)
    _write(out, "manifest.json",
           json.dumps(_manifest("simulate", argv, effective, None, start, [], dict(written),
                                "partial" if partial else "ok"), indent=2) + "\n", {})
    return EXIT_PARTIAL if partial else EXIT_OK


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--tau", help="comma-separated quantile levels, e.g. 0.2,0.5,0.8")
    p.add_argument("--events", help="'trivial' or 'lower:q1,q2,...'")
    p.add_argument("--expansions", help="comma-separated extra covariates: square,abs")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--threads", type=int, help="worker threads (default: $QGM_THREADS or 1)")
    p.add_argument("--out", default=".", help="output directory")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qgm", description="Quantile graphical models")
    parser.add_argument("--version", action="version", version=f"qgm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, kind in (("estimate-ci", "ci"), ("estimate-p", "p")):
        p = sub.add_parser(name, help=f"fit the {'conditional-independence' if kind == 'ci' else 'predictive'} model")
        p.add_argument("data", help="CSV file with a header row")
        _common(p)
        p.add_argument("--w-column", help="conditioning column (removed from the nodes)")
        p.add_argument("--dot", action="store_true", help="also write graph.dot")
        if kind == "ci":
            p.add_argument("--rule", choices=("score", "support"), help="edge rule")
        else:
            p.add_argument("--covar", action="store_true", help="write covar.csv and covar.json")
        p.set_defaults(kind=kind)

    s = sub.add_parser("simulate", help="run a simulation design")
    s.add_argument("--design", required=True, choices=("hub", "nongauss", "gauss-ar", "null"))
    s.add_argument("--n", type=int, default=400)
    s.add_argument("--d", type=int, default=40)
    s.add_argument("--reps", type=int, default=20)
    s.add_argument("--method", choices=("support", "ci", "p"), default="support")
    s.add_argument("--rho", type=float, default=0.5, help="AR(1) correlation for gauss-ar")
    _common(s)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    if args.command == "simulate":
        return _simulate(args, argv)
    return _estimate(args, args.kind, argv)


if __name__ == "__main__":
    sys.exit(main())
