"""``loopcalc`` command-line interface.

Every command prints one JSON report on stdout (``--pretty`` prints a
plain-text rendering instead).  Exit codes: 0 success (non-convergence
included), 2 input error, 3 budget exceeded, 4 numerical degeneracy.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bp import BPConfig, bp_run, check_stationarity
from .coloring import fig6_edges, load_edge_list, table1_report
from .errors import BudgetError, DegenerateError, InputError
from .factor_graph import FactorGraph, brute_force_log_partition, exact_inference_ve
from .gaussian import GaussianModel, gaussian_bp_run, gaussian_exact, gaussian_single_cycle, walk_sum_check
from .loops import (
    full_loop_series,
    marginal_correction,
    truncated_series_estimates,
    write_ledger,
)

EXIT_INPUT, EXIT_BUDGET, EXIT_DEGENERATE = 2, 3, 4


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None

    return parse


def _load_graph(path: str) -> FactorGraph:
    try:
        g = FactorGraph.load(path)
    except OSError as exc:
        raise InputError(f"cannot read model file: {exc}") from None
    g.require_valid()
    return g


def _resolve_var(g: FactorGraph, token: str) -> int:
    for key in (token, _maybe_int(token)):
        if key in g.var_index:
            return g.var_index[key]
    raise InputError(f"unknown variable id {token!r}")


def _maybe_int(token: str):
    try:
        return int(token)
    except ValueError:
        return token


def _finite(x: float) -> float | None:
    return x if math.isfinite(x) else None


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_exact(args) -> dict:
    g = _load_graph(args.model)
    if args.method == "brute":
        log_z = brute_force_log_partition(g)
        out = {"method": "brute"}
    else:
        order = None if args.order == "auto" else [_resolve_var(g, t) for t in args.order.split(",")]
        res = exact_inference_ve(g, elimination_order=order, marginals=args.marginals)
        log_z = res.log_z
        out = {"method": "ve"}
        if args.marginals:
            out["marginals"] = {str(v.id): res.marginals[k].tolist() for k, v in enumerate(g.variables)}
    out.update(log_z=log_z, Z=_finite(math.exp(log_z)))
    return {"model_digest": g.digest(), "results": out}


def _bp_config(args) -> BPConfig:
    return BPConfig(tolerance=args.tol, max_iterations=args.max_iter, damping=args.damping, schedule=args.schedule)


def cmd_bp(args) -> dict:
    g = _load_graph(args.model)
    res = bp_run(g, init=args.init, config=_bp_config(args), seed=args.seed)
    out = res.to_dict(g)
    out["Z_bethe"] = _finite(res.z_bethe)
    out["stationarity_violation"] = check_stationarity(g, res.messages).max_violation
    if res.free_energy_parts is not None:
        out["U_bethe"], out["H_bethe"] = res.free_energy_parts
    return {"model_digest": g.digest(), "results": out}


def _g_table(args, g: FactorGraph, n: int) -> np.ndarray:
    if args.g_table is None:
        # indicator that every variable in C takes symbol 0
        table = np.zeros((g.q,) * n)
        table[(0,) * n] = 1.0
        return table
    try:
        doc = json.loads(Path(args.g_table).read_text())
    except OSError as exc:
        raise InputError(f"cannot read g table: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{args.g_table}: JSON parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return np.asarray(doc, dtype=float)


def cmd_loops(args) -> dict:
    g = _load_graph(args.model)
    res = bp_run(g, init=args.init, config=_bp_config(args), seed=args.seed)
    out: dict = {"mode": args.mode, "converged": res.converged, "log_z_bethe": res.log_z_bethe}
    if args.mode == "full":
        sr = full_loop_series(g, res, method=args.weight, max_edges=args.max_edges)
        out.update(Z_estimate=_finite(sr.z_estimate), series_sum=sr.series_sum, n_loops=len(sr.ledger))
        ledger = sr.ledger
    elif args.mode == "simple":
        est = truncated_series_estimates(g, res, method=args.weight if args.weight != "diagonal_fisher" else "trace")
        out.update(
            Z_bethe=_finite(est.z_bethe),
            Z_bethe_plus_loops=_finite(est.z_bethe_plus_loops),
            Z_bethe_times_loops=_finite(est.z_bethe_times_loops),
            n_loops=len(est.ledger),
        )
        ledger = est.ledger
    else:
        if not args.C:
            raise InputError("--mode marginal needs --C")
        C = [_resolve_var(g, t) for t in args.C.split(",")]
        order = sorted(set(C))
        mc = marginal_correction(g, res, order, _g_table(args, g, len(order)), max_edges=args.max_edges)
        out.update(
            C=[g.variables[i].id for i in order],
            estimate=mc.estimate,
            bethe_estimate=mc.bethe_estimate,
            n_terms=mc.n_terms,
        )
        ledger = []
    out["ledger"] = [entry.to_dict(g) for entry in ledger]
    if args.ledger:
        with open(args.ledger, "w") as fh:
            write_ledger(ledger, fh, g)
    return {"model_digest": g.digest(), "results": out}


def cmd_coloring(args) -> dict:
    edges = fig6_edges() if args.graph is None else load_edge_list(args.graph)
    rows = table1_report(edges, args.q, args.w, exact=args.exact)
    digest = hashlib.sha256(json.dumps(sorted(edges)).encode()).hexdigest()
    report = {"graph_digest": digest, "results": {"rows": [r.to_dict() for r in rows]}}
    if args.out:
        Path(args.out).write_text(json.dumps(report["results"], indent=2, sort_keys=True) + "\n")
    return report


def cmd_gaussian(args) -> dict:
    try:
        model = GaussianModel.load(args.model)
    except OSError as exc:
        raise InputError(f"cannot read model file: {exc}") from None
    digest = hashlib.sha256(json.dumps(model.to_dict(), sort_keys=True).encode()).hexdigest()
    if args.op == "exact":
        ex = gaussian_exact(model)
        out = {"log_z": ex.log_z, "mean": ex.mean.tolist(), "cov": ex.cov.tolist()}
    elif args.op == "bp":
        out = gaussian_bp_run(model, _bp_config(args)).to_dict()
    elif args.op == "single-cycle":
        out = gaussian_single_cycle(model, _bp_config(args)).to_dict()
        out["exact_log_z"] = gaussian_exact(model).log_z
    else:
        out = walk_sum_check(model, args.i, args.max_len, _bp_config(args)).to_dict()
    return {"model_digest": digest, "results": out}


# --------------------------------------------------------------------------
# plumbing
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="loopcalc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"loopcalc {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--pretty", action="store_true", help="plain-text output instead of JSON")
    common.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    common.add_argument("--timing", action="store_true", help="include wall-clock time (breaks byte-identical reruns)")

    bp_opts = argparse.ArgumentParser(add_help=False)
    bp_opts.add_argument("--tol", type=float, default=1e-10)
    bp_opts.add_argument("--max-iter", type=int, default=10_000)
    bp_opts.add_argument("--damping", type=float, default=0.0)
    bp_opts.add_argument("--schedule", choices=["parallel", "sequential"], default="parallel")

    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("exact", parents=[common], help="exact partition function")
    s.add_argument("model")
    s.add_argument("--method", choices=["brute", "ve"], default="ve")
    s.add_argument("--order", default="auto", help="'auto' (min-fill) or comma-separated variable ids")
    s.add_argument("--marginals", action="store_true", help="also report exact single-variable marginals")
    s.set_defaults(func=cmd_exact)

    s = sub.add_parser("bp", parents=[common, bp_opts], help="belief propagation and the Bethe approximation")
    s.add_argument("model")
    s.add_argument("--init", choices=["uniform", "random"], default="uniform")
    s.set_defaults(func=cmd_bp)

    s = sub.add_parser("loops", parents=[common, bp_opts], help="loop-series corrections")
    s.add_argument("model")
    s.add_argument("--init", choices=["uniform", "random"], default="uniform")
    s.add_argument("--mode", choices=["full", "simple", "marginal"], default="full")
    s.add_argument("--weight", choices=["diagonal_fisher", "theorem1", "delta_basis", "binary", "trace"],
                   default="diagonal_fisher")
    s.add_argument("--max-edges", type=int, default=None)
    s.add_argument("--C", default=None, help="comma-separated variable ids (marginal mode)")
    s.add_argument("--g-table", default=None, help="JSON array of shape (q,)*|C| (marginal mode)")
    s.add_argument("--ledger", default=None, help="also write the per-loop ledger as JSON lines to this file")
    s.set_defaults(func=cmd_loops)

    s = sub.add_parser("coloring", parents=[common], help="weighted-coloring table on a regular graph")
    s.add_argument("--graph", default=None, help="edge-list file (default: bundled 16-node cubic graph)")
    s.add_argument("--q", type=_csv(int), default=[3, 4, 9])
    s.add_argument("--w", type=_csv(float), default=[1.0, 1.5])
    s.add_argument("--exact", choices=["ve", "brute"], default="ve")
    s.add_argument("--out", default=None, help="also write the rows to this JSON file")
    s.set_defaults(func=cmd_coloring)

    s = sub.add_parser("gaussian", parents=[common, bp_opts], help="Gaussian model operations")
    s.add_argument("model")
    s.add_argument("--op", choices=["exact", "bp", "single-cycle", "walk-sum"], default="exact")
    s.add_argument("--i", type=int, default=0, help="variable for --op walk-sum")
    s.add_argument("--max-len", type=int, default=200)
    s.set_defaults(func=cmd_gaussian)
    return p


def _pretty(report: dict) -> str:
    res = report["results"]
    if report["command"][0] == "coloring":
        head = f"{'w':>5} {'q':>3} {'Z':>22} {'ZB/Z':>10} {'ZB+L/Z':>10} {'ZBxL/Z':>10}"
        lines = [head]
        for r in res["rows"]:
            lines.append(
                f"{r['w']:>5g} {r['q']:>3d} {r['Z']:>22.10g} {r['Z_Bethe/Z']:>10.6f} "
                f"{r['Z_Bethe+loops/Z']:>10.6f} {r['Z_Bethe*loops/Z']:>10.6f}"
            )
        return "\n".join(lines)
    lines = []
    for key in sorted(res):
        val = res[key]
        if isinstance(val, (dict, list)) and len(json.dumps(val)) > 80:
            val = f"<{type(val).__name__} of {len(val)} entries>"
        lines.append(f"{key}: {val}")
    return "\n".join(lines)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    start = time.perf_counter()
    try:
        report = args.func(args)
    except InputError as exc:
        print(f"loopcalc: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BudgetError as exc:
        print(f"loopcalc: budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except DegenerateError as exc:
        print(f"loopcalc: numerical degeneracy: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    report = {"command": argv, "tool_version": __version__, **report}
    if args.timing:
        report["timing_seconds"] = time.perf_counter() - start
    if args.pretty:
        print(_pretty(report))
    else:
        print(json.dumps(report, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
