"""``semiprof`` command line: toy, transform, garchm, quadcheck and report.

Exit codes: 0 success, 1 experiment failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys

import numpy as np

from . import harness
from .errors import ExperimentError, SemiprofError

# config keys that differ from the flag destinations
_CONFIG_ALIASES = {"T": "t"}


class UsageError(Exception):
    pass


def _grid(text: str) -> list:
    """``a:b:step`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            k = int(math.floor((b - a) / step + 1e-9))
            return [round(a + i * step, 12) for i in range(k + 1)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid grid {text!r}; use a:b:step or a,b,c") from None


def _methods(text: str) -> list:
    return [m.strip() for m in text.split(",") if m.strip()]


def _noise(text: str):
    if text == "conditional":
        return text
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("noise must be 'conditional' or a positive number") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("noise must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="write results here (CSV) instead of stdout")
    common.add_argument("--threads", type=int, help="worker processes (default $SEMIPROF_THREADS or 1)")
    common.add_argument("--config", help="JSON file of option values; explicit flags take precedence")

    exp = argparse.ArgumentParser(add_help=False)
    exp.add_argument("--summary", help="write the aggregate JSON here")
    exp.add_argument("--no-timing", action="store_true", help="omit the seconds column (byte-stable output)")
    exp.add_argument("--max-failure-rate", type=float, default=harness.MAX_FAILURE_RATE)

    p = argparse.ArgumentParser(prog="semiprof", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("toy", parents=[common], help="step counts on the quadratic toy loss")
    t.add_argument("--alpha-grid", type=_grid, default=_grid("0:1.8:0.2"))
    t.add_argument("--c-grid", type=_grid, default=[float(k * k) for k in range(1, 11)])
    t.add_argument("--tol", type=float, default=1e-6)
    t.add_argument("--paths", action="store_true", help="emit convergence paths instead of mean steps")
    t.add_argument("--path-alpha", type=float, default=1.6)
    t.add_argument("--path-c", type=float, default=4.0)
    t.add_argument("--path-gamma", type=float, default=2 * math.pi * 0.1)

    tr = sub.add_parser("transform", parents=[common, exp], help="transformation-model Monte Carlo")
    tr.add_argument("--n", type=int, default=500)
    tr.add_argument("--reps", type=int, default=100)
    tr.add_argument("--seed", type=int, default=1)
    tr.add_argument("--methods", type=_methods, default=list(harness.TRANSFORM_METHODS))
    tr.add_argument("--h-scale", dest="h_scale", type=float, default=1.0)
    tr.add_argument("--tol", type=float, default=1e-8)
    tr.add_argument("--max-iter", type=int, default=200)

    g = sub.add_parser("garchm", parents=[common, exp], help="GARCH-M Monte Carlo")
    g.add_argument("--setup", choices=("A", "B"), default="A")
    g.add_argument("--t", type=int, default=500)
    g.add_argument("--reps", type=int, default=100)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--methods", type=_methods, default=["ip", "backfit"])
    g.add_argument("--noise", type=_noise, default="conditional")
    g.add_argument("--burn-in", dest="burn_in", type=int, default=500)
    g.add_argument("--tol", type=float, default=1e-6)
    g.add_argument("--max-iter", type=int, default=500)
    g.add_argument("--degree", type=int, default=2)

    q = sub.add_parser("quadcheck", parents=[common], help="two-step property suite on random quadratics")
    q.add_argument("--p", type=int, help="theta dimension (default: random in 1..5)")
    q.add_argument("--q", type=int, help="lambda dimension (default: random in 1..50)")
    q.add_argument("--trials", type=int, default=200)
    q.add_argument("--cond-max", type=float, default=1e3)
    q.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("report", parents=[common], help="aggregate a results CSV")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--format", choices=("table", "csv", "json"), default="table")
    return p


def _apply_config(parser, argv) -> argparse.Namespace:
    """Parse ``argv``; values from ``--config`` fill in options not given explicitly."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in cfg.items():
        dest = _CONFIG_ALIASES.get(key, key.replace("-", "_"))
        if dest in ("config", "help", "command"):
            continue
        if dest not in known:
            raise UsageError(f"unknown config key {key!r} for '{args.command}'")
        action = known[dest]
        try:
            if dest == "methods" and isinstance(value, list):
                value = [str(v) for v in value]
            elif action.type in (_grid, _noise):
                value = [float(v) for v in value] if isinstance(value, list) else action.type(str(value))
            elif action.type is not None:
                value = action.type(value)
        except (argparse.ArgumentTypeError, ValueError, TypeError) as exc:
            raise UsageError(f"bad value for {key!r}: {exc}") from exc
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _emit(text: str, out) -> None:
    if out:
        with open(out, "w", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _run_toy(args) -> int:
    from .models.toy import METHODS, convergence_path, toy_step_experiment

    if args.paths:
        rows = []
        for m in METHODS:
            rows += convergence_path(args.path_alpha, args.path_c, args.path_gamma, m, args.tol)
        _emit(harness.rows_to_csv(rows, ("method", "step_index", "x", "y")), args.out)
        return 0
    if not args.alpha_grid or not args.c_grid:
        raise UsageError("grids must be non-empty")
    rows = toy_step_experiment(args.alpha_grid, args.c_grid, tol=args.tol)
    _emit(harness.rows_to_csv(rows, ("method", "alpha", "C", "mean_steps")), args.out)
    return 0


def _finish(report, args) -> int:
    _emit(report.to_csv(timing=not args.no_timing), args.out)
    if args.summary:
        with open(args.summary, "w") as fh:
            fh.write(report.to_json() + "\n")
    if args.out:
        sys.stderr.write(render_table(report.aggregates, report.meta))
    return 0


def _run_transform(args) -> int:
    rep = harness.run_transform_experiment(
        args.n, args.reps, args.seed, args.methods, h_scale=args.h_scale, tol=args.tol,
        max_iter=args.max_iter, threads=harness.resolve_threads(args.threads),
        max_failure_rate=args.max_failure_rate,
    )
    return _finish(rep, args)


def _run_garchm(args) -> int:
    rep = harness.run_garchm_experiment(
        args.setup, args.t, args.reps, args.seed, args.methods, noise=args.noise, burn_in=args.burn_in,
        tol=args.tol, max_iter=args.max_iter, degree=args.degree,
        threads=harness.resolve_threads(args.threads), max_failure_rate=args.max_failure_rate,
    )
    return _finish(rep, args)


def _run_quadcheck(args) -> int:
    res = harness.run_quadcheck(args.p, args.q, args.trials, args.cond_max, args.seed)
    lines = [
        f"trials: {res.trials}",
        f"ip <= 2 iterations: {res.ip_ok}/{res.trials}",
        f"nr = 1 iteration: {res.nr_ok}/{res.trials}",
        f"ip theta step = newton theta step: {res.direction_ok}/{res.trials}",
        f"ip and nr limits agree: {res.agree_ok}/{res.trials}",
        f"max ip exit residual: {res.max_ip_residual:.3g}",
        "PASS" if res.passed else "FAIL",
    ]
    _emit("\n".join(lines) + "\n", args.out)
    return 0 if res.passed else 1


# report ------------------------------------------------------------------------

def _read_rows(path) -> tuple[list, list]:
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            return list(reader), reader.fieldnames or []
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def aggregate_csv(rows, columns) -> tuple[dict, dict]:
    """Aggregates from a results CSV written by ``transform`` or ``garchm``."""
    from .models.garchm import PAPER_THETA as GARCH_THETA
    from .models.transform import PAPER_THETA as TRANSFORM_THETA

    if "converged" not in columns or "method" not in columns:
        raise UsageError("unrecognised results CSV (expected transform or garchm columns)")
    conv = [r for r in rows if r["converged"] == "true"]
    methods = list(dict.fromkeys(r["method"] for r in rows))
    timing = "seconds" in columns
    out = {}
    if "omega_hat" in columns:
        setup, T = rows[0]["setup"], int(rows[0]["T"])
        truth = np.array(GARCH_THETA[setup])
        meta = {"experiment": "garchm", "setup": setup, "n_or_T": T}
        for m in methods:
            ok = [r for r in conv if r["method"] == m]
            agg = harness.aggregate_metrics(
                [[float(r["omega_hat"]), float(r["alpha_hat"]), float(r["beta_hat"])] for r in ok],
                truth, harness.GARCHM_COORDS) if ok else {}
            agg["converged"] = len(ok)
            agg["excluded"] = sum(r["method"] == m for r in rows) - len(ok)
            agg["mean_iterations"] = float(np.mean([int(r["iterations"]) for r in ok])) if ok else float("nan")
            agg["mean_seconds"] = float(np.mean([float(r["seconds"]) for r in ok])) if ok and timing else float("nan")
            out[m] = agg
    elif "mse_contrib" in columns:
        meta = {"experiment": "transform", "n_or_T": int(rows[0]["n"])}
        for m in methods:
            ok = [r for r in conv if r["method"] == m]
            sq = np.array([float(r["sq_error"]) for r in ok])
            out[m] = {
                "mse": float(np.mean([float(r["mse_contrib"]) for r in ok])) if ok else float("nan"),
                "rmse_vector": float(math.sqrt(sq.mean())) if ok else float("nan"),
                "converged": len(ok),
                "excluded": sum(r["method"] == m for r in rows) - len(ok),
                "mean_iterations": float(np.mean([int(r["iterations"]) for r in ok])) if ok else float("nan"),
                "mean_seconds": float(np.mean([float(r["seconds"]) for r in ok])) if ok and timing else float("nan"),
            }
        meta["p"] = int(TRANSFORM_THETA.size)
    else:
        raise UsageError("unrecognised results CSV (expected transform or garchm columns)")
    return out, meta


def render_table(aggregates: dict, meta: dict) -> str:
    """Plain-text table: error metrics, time and iterations per method."""
    lines = []
    if meta.get("experiment") == "garchm":
        lines.append(f"GARCH-M setup {meta.get('setup')}, T = {meta.get('n_or_T')}")
        lines.append(f"{'method':<10}{'metric':<8}{'omega':>10}{'alpha':>10}{'beta':>10}")
        for m, agg in aggregates.items():
            coords = agg.get("coords")
            if not coords:
                lines.append(f"{m:<10}(no converged replicates)")
                continue
            for key in ("bias", "se", "mae", "rmse"):
                vals = "".join(f"{coords[c][key]:>10.4f}" for c in harness.GARCHM_COORDS)
                lines.append(f"{m:<10}{key.upper():<8}{vals}")
        lines.append("")
        lines.append(f"{'method':<10}{'time (s)':>12}{'iterations':>12}{'converged':>11}{'excluded':>10}")
        for m, agg in aggregates.items():
            lines.append(f"{m:<10}{agg['mean_seconds']:>12.4f}{agg['mean_iterations']:>12.2f}"
                         f"{agg['converged']:>11d}{agg['excluded']:>10d}")
    else:
        lines.append(f"Transformation model, n = {meta.get('n_or_T')}")
        lines.append(f"{'method':<20}{'MSE':>9}{'RMSE':>9}{'time (s)':>11}{'iterations':>12}{'excluded':>10}")
        for m, agg in aggregates.items():
            lines.append(f"{m:<20}{agg.get('mse', float('nan')):>9.3f}{agg.get('rmse_vector', float('nan')):>9.3f}"
                         f"{agg['mean_seconds']:>11.4f}{agg['mean_iterations']:>12.2f}{agg['excluded']:>10d}")
    return "\n".join(lines) + "\n"


def _run_report(args) -> int:
    rows, columns = _read_rows(args.input)
    if not rows:
        raise UsageError(f"{args.input} has no data rows")
    aggs, meta = aggregate_csv(rows, columns)
    if args.format == "json":
        text = json.dumps({"meta": meta, "aggregates": aggs}, indent=2, sort_keys=True) + "\n"
    elif args.format == "csv":
        flat = []
        for m, agg in aggs.items():
            for coord, vals in agg.get("coords", {}).items():
                flat.append({"method": m, "coordinate": coord, **vals})
            if "coords" not in agg and meta["experiment"] == "transform":
                flat.append({"method": m, "coordinate": "all", "mse": agg["mse"], "rmse": agg["rmse_vector"]})
        cols = ("method", "coordinate", "bias", "se", "mae", "rmse") if meta["experiment"] == "garchm" \
            else ("method", "coordinate", "mse", "rmse")
        text = harness.rows_to_csv(flat, cols)
    else:
        text = render_table(aggs, meta)
    _emit(text, args.out)
    return 0


_COMMANDS = {
    "toy": _run_toy,
    "transform": _run_transform,
    "garchm": _run_garchm,
    "quadcheck": _run_quadcheck,
    "report": _run_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else 2
    except UsageError as exc:
        print(f"semiprof: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"semiprof: error: {exc}", file=sys.stderr)
        return 2
    except (ExperimentError, SemiprofError) as exc:
        print(f"semiprof: experiment failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
