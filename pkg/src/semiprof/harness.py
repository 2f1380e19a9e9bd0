"""Seeded Monte Carlo replication, metric aggregation and results files.

Replicate ``b`` of an experiment with master seed ``s`` draws all of its
randomness from ``SeedSequence(s, spawn_key=(b,))``, so results do not depend
on how replicates are spread over workers.  Worker processes run with BLAS
limited to one thread and results are joined in replicate order.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ExperimentError, SemiprofError
from .linalg import random_quadratic
from .solver import ParameterState, SolverConfig, canonical_method, init_lambda, run_solver

MAX_FAILURE_RATE = 0.05
TRANSFORM_METHODS = ("implicit_profiling", "newton_raphson", "naive_iteration")
TRANSFORM_COLUMNS = ("method", "n", "rep", "mse_contrib", "sq_error", "iterations", "seconds", "converged")
GARCHM_COLUMNS = ("method", "setup", "T", "rep", "omega_hat", "alpha_hat", "beta_hat",
                  "iterations", "seconds", "converged", "extrapolation_warnings")
GARCHM_COORDS = ("omega", "alpha", "beta")


# seeds and workers ---------------------------------------------------------

def replicate_seed(master_seed: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(rep),))


def resolve_threads(threads=None) -> int:
    """``threads``, else ``$SEMIPROF_THREADS``, else 1."""
    if threads is None:
        env = os.environ.get("SEMIPROF_THREADS")
        threads = int(env) if env else 1
    threads = int(threads)
    if threads < 1:
        raise ValueError("threads must be >= 1")
    return threads


def _limited_call(args):
    fn, item = args
    with threadpool_limits(limits=1):
        return fn(item)


def parallel_map(fn, items, threads: int = 1) -> list:
    """``[fn(x) for x in items]`` across ``threads`` worker processes, in input order.

    ``fn`` must be picklable (a module-level function or a ``functools.partial``).
    """
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [_limited_call((fn, x)) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(_limited_call, [(fn, x) for x in items]))


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# metrics -------------------------------------------------------------------

def aggregate_metrics(estimates, truth, names=None, ddof: int = 0) -> dict:
    """Per-coordinate bias, SE, MAE and RMSE plus the averaged MSE.

    ``estimates`` is ``B x p``.  ``bias = truth - mean``; ``se`` is the Monte
    Carlo standard deviation with divisor ``B - ddof`` (``ddof=0`` gives
    ``rmse^2 = bias^2 + se^2``).  ``mse`` averages the coordinate mean squared
    errors; ``rmse_vector = sqrt(B^-1 sum_b |est_b - truth|^2)``.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    truth = np.asarray(truth, dtype=float)
    if est.shape[0] < 1 or est.size == 0:
        raise ExperimentError("no converged replicates to aggregate")
    if est.shape[1] != truth.size:
        raise ValueError("estimates and truth have different dimensions")
    if est.shape[0] - ddof < 1:
        raise ValueError("not enough replicates for the requested ddof")
    names = list(names) if names is not None else [f"theta{j + 1}" for j in range(truth.size)]
    err = est - truth
    mean = est.mean(axis=0)
    bias = truth - mean
    se = np.sqrt(np.sum((est - mean) ** 2, axis=0) / (est.shape[0] - ddof))
    mae = np.mean(np.abs(err), axis=0)
    msq = np.mean(err**2, axis=0)
    coords = {
        n: {"bias": float(bias[j]), "se": float(se[j]), "mae": float(mae[j]), "rmse": float(math.sqrt(msq[j]))}
        for j, n in enumerate(names)
    }
    return {
        "coords": coords,
        "mse": float(msq.mean()),
        "rmse_vector": float(math.sqrt(msq.sum())),
        "replicates": int(est.shape[0]),
    }


@dataclass
class ReplicationReport:
    """Per-replicate rows, aggregates by method and run metadata.

    ``per_rep`` entries hold ``method, rep, estimates, iterations, seconds,
    converged`` and ``error`` (message of a failed solve, else ``None``).
    """

    per_rep: list
    aggregates: dict
    meta: dict
    rows: list = field(default_factory=list)
    columns: tuple = ()

    def to_json(self) -> str:
        return json.dumps({"meta": self.meta, "aggregates": self.aggregates}, indent=2, sort_keys=True)

    def to_csv(self, timing: bool = True) -> str:
        return rows_to_csv(self.rows, self.columns, timing=timing)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows, columns, timing: bool = True) -> str:
    """CSV text with ``repr`` floats; ``timing=False`` drops the ``seconds`` column."""
    cols = [c for c in columns if timing or c != "seconds"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in cols])
    return buf.getvalue()


def summarize(per_rep, truth, names, reps: int, max_failure_rate: float = MAX_FAILURE_RATE) -> dict:
    """Aggregates per method over converged replicates.

    Replicates whose solve raised count as failures; more than
    ``max_failure_rate`` of them for any method raises ``ExperimentError``.
    """
    out = {}
    for method in dict.fromkeys(r["method"] for r in per_rep):
        mine = [r for r in per_rep if r["method"] == method]
        ok = [r for r in mine if r["converged"]]
        ran = [r for r in mine if r["error"] is None]
        failed = len(mine) - len(ran)
        if failed > max_failure_rate * reps:
            msgs = sorted({r["error"] for r in mine if r["error"]})
            raise ExperimentError(f"{method}: {failed}/{reps} replicates failed ({'; '.join(msgs[:3])})")
        agg = aggregate_metrics([r["estimates"] for r in ok], truth, names) if ok else {}
        agg.update(
            converged=len(ok),
            excluded=len(mine) - len(ok),
            failed=failed,
            mean_iterations=float(np.mean([r["iterations"] for r in ok])) if ok else float("nan"),
            # converged and max_iter replicates; failed solves carry no count
            mean_iterations_all=float(np.mean([r["iterations"] for r in ran])) if ran else float("nan"),
            mean_seconds=float(np.mean([r["seconds"] for r in ok])) if ok else float("nan"),
        )
        out[method] = agg
    return out


# transformation model --------------------------------------------------------

def _transform_rep(args):
    from .models.transform import (
        PAPER_THETA, TransformModelSpec, generate_transform_data, transform_system,
    )

    n, rep, seed, methods, h_scale, tol, max_iter = args
    theta_star = PAPER_THETA
    data = generate_transform_data(n, theta_star, seed=replicate_seed(seed, rep))
    spec = TransformModelSpec.default_for(data, h_scale)
    out = []
    for method in methods:
        cfg = SolverConfig(method=method, tol=tol, max_iter=max_iter)
        system = transform_system(data, spec)
        t0 = time.perf_counter()
        try:
            theta0 = np.zeros(data.p)
            lam0 = init_lambda(system, theta0, cfg)
            rep_ = run_solver(system, ParameterState(theta0, lam0), dataclasses.replace(cfg, init_lambda_mode="given"))
            est, its, conv, err = rep_.final.theta, rep_.iterations, rep_.converged, None
        except SemiprofError as exc:
            est, its, conv, err = np.full(data.p, np.nan), 0, False, f"{type(exc).__name__}: {exc}"
        secs = time.perf_counter() - t0
        out.append({"method": method, "rep": rep, "estimates": np.asarray(est, dtype=float),
                    "iterations": int(its), "seconds": secs, "converged": bool(conv), "error": err})
    return out


def run_transform_experiment(n: int, reps: int, seed: int, methods=TRANSFORM_METHODS,
                             h_scale: float = 1.0, tol: float = 1e-8, max_iter: int = 200,
                             threads: int = 1, max_failure_rate: float = MAX_FAILURE_RATE) -> ReplicationReport:
    """Monte Carlo study of the transformation model with ``theta0 = 0`` for every method.

    Timing covers the lambda initialisation and the solve.
    """
    from .models.transform import PAPER_THETA

    if n < 2 or reps < 1:
        raise ValueError("need n >= 2 and reps >= 1")
    methods = tuple(canonical_method(m) for m in methods)
    jobs = [(n, b, seed, methods, h_scale, tol, max_iter) for b in range(reps)]
    per_rep = [r for chunk in parallel_map(_transform_rep, jobs, threads) for r in chunk]
    p = PAPER_THETA.size
    rows = []
    for r in per_rep:
        sq = float(np.sum((r["estimates"] - PAPER_THETA) ** 2))
        rows.append({"method": r["method"], "n": n, "rep": r["rep"], "mse_contrib": sq / p, "sq_error": sq,
                     "iterations": r["iterations"], "seconds": r["seconds"], "converged": r["converged"]})
    config = {"experiment": "transform", "n": n, "reps": reps, "seed": seed, "methods": list(methods),
              "h_scale": h_scale, "tol": tol, "max_iter": max_iter}
    meta = {"experiment": "transform", "n_or_T": n, "reps": reps, "seed": seed, "config_hash": config_hash(config)}
    aggs = summarize(per_rep, PAPER_THETA, None, reps, max_failure_rate)
    return ReplicationReport(per_rep, aggs, meta, rows, TRANSFORM_COLUMNS)


# GARCH-M ---------------------------------------------------------------------

def garchm_initial_value(truth, rng, scale: float = 0.01, max_draws: int = 10_000) -> np.ndarray:
    """``truth + N(0, scale^2)`` per coordinate, redrawn until stationary."""
    from .models.garchm import is_admissible

    truth = np.asarray(truth, dtype=float)
    for _ in range(max_draws):
        cand = truth + rng.normal(0.0, scale, size=truth.size)
        if is_admissible(cand):
            return cand
    raise ExperimentError("could not draw a stationary starting value")


MAX_REDRAWS = 10


def _garchm_series(setup, T, noise, burn_in, data_ss):
    """Series from the replicate's data stream; explosive paths are redrawn from the same stream."""
    from .models.garchm import ExplosivePathError, generate_garchm

    rng = np.random.default_rng(data_ss)
    for redraws in range(MAX_REDRAWS + 1):
        try:
            return generate_garchm(setup, T, sigma_noise=noise, seed=rng, burn_in=burn_in).y, redraws
        except ExplosivePathError:
            continue
    raise ExperimentError(f"{MAX_REDRAWS + 1} consecutive explosive paths")


def _garchm_rep(args):
    from .models.garchm import PAPER_THETA, garchm_solve

    setup, T, rep, seed, methods, noise, burn_in, tol, max_iter, degree = args
    truth = np.array(PAPER_THETA[setup])
    ss = replicate_seed(seed, rep)
    data_ss, init_ss = ss.spawn(2)
    y, redraws = _garchm_series(setup, T, noise, burn_in, data_ss)
    init = garchm_initial_value(truth, np.random.default_rng(init_ss))
    cfg = SolverConfig(tol=tol, max_iter=max_iter)
    out = []
    for method in methods:
        t0 = time.perf_counter()
        try:
            r = garchm_solve(y, method, init, cfg, degree=degree)
            est, its, conv, warn, err = r.final.theta, r.iterations, r.converged, r.extrapolation_warnings, None
        except SemiprofError as exc:
            est, its, conv, warn, err = np.full(3, np.nan), 0, False, 0, f"{type(exc).__name__}: {exc}"
        out.append({"method": method, "rep": rep, "estimates": np.asarray(est, dtype=float), "iterations": int(its),
                    "seconds": time.perf_counter() - t0, "converged": bool(conv), "error": err,
                    "extrapolation_warnings": int(warn), "data_redraws": redraws})
    return out


def run_garchm_experiment(setup: str, T: int, reps: int, seed: int, methods=("ip", "backfit"),
                          noise="conditional", burn_in: int = 500, tol: float = 1e-6, max_iter: int = 500,
                          degree: int = None, threads: int = 1,
                          max_failure_rate: float = MAX_FAILURE_RATE) -> ReplicationReport:
    """Monte Carlo study of the GARCH-M estimators from a shared perturbed start per replicate."""
    from .models.garchm import DEFAULT_DEGREE, GARCHM_METHODS, PAPER_THETA, SETUPS

    if setup not in SETUPS:
        raise ValueError(f"setup must be one of {SETUPS}")
    methods = tuple(methods)
    for m in methods:
        if m not in GARCHM_METHODS:
            raise ValueError(f"method must be one of {GARCHM_METHODS}")
    if reps < 1:
        raise ValueError("reps must be >= 1")
    degree = DEFAULT_DEGREE if degree is None else int(degree)
    jobs = [(setup, T, b, seed, methods, noise, burn_in, tol, max_iter, degree) for b in range(reps)]
    per_rep = [r for chunk in parallel_map(_garchm_rep, jobs, threads) for r in chunk]
    rows = []
    for r in per_rep:
        w, a, b = (float(v) for v in r["estimates"])
        rows.append({"method": r["method"], "setup": setup, "T": T, "rep": r["rep"], "omega_hat": w,
                     "alpha_hat": a, "beta_hat": b, "iterations": r["iterations"], "seconds": r["seconds"],
                     "converged": r["converged"], "extrapolation_warnings": r["extrapolation_warnings"]})
    config = {"experiment": "garchm", "setup": setup, "T": T, "reps": reps, "seed": seed, "methods": list(methods),
              "noise": noise, "burn_in": burn_in, "tol": tol, "max_iter": max_iter, "degree": degree}
    meta = {"experiment": "garchm", "setup": setup, "n_or_T": T, "reps": reps, "seed": seed,
            "config_hash": config_hash(config),
            "data_redraws": sum({r["rep"]: r["data_redraws"] for r in per_rep}.values())}
    aggs = summarize(per_rep, np.array(PAPER_THETA[setup]), GARCHM_COORDS, reps, max_failure_rate)
    return ReplicationReport(per_rep, aggs, meta, rows, GARCHM_COLUMNS)


# quadratic property suite ------------------------------------------------------

@dataclass
class QuadcheckResult:
    trials: int
    ip_ok: int
    nr_ok: int
    direction_ok: int
    agree_ok: int
    max_ip_residual: float
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.ip_ok == self.nr_ok == self.direction_ok == self.agree_ok == self.trials


def run_quadcheck(p=None, q=None, trials: int = 200, cond_max: float = 1e3, seed: int = 0,
                  p_max: int = 5, q_max: int = 50, residual_tol: float = 1e-10) -> QuadcheckResult:
    """Two-step convergence and stationary-point agreement on random quadratics.

    Per trial: IP from a random start with the given lambda converges in at
    most two sweeps with residuals ``<= residual_tol``; Newton-Raphson takes
    exactly one step; one IP theta update equals the theta part of one
    Newton step (1e-12); both limit points agree within ``10*tol``.
    ``p``/``q`` of ``None`` draw sizes uniformly from ``1..p_max``/``1..q_max``.
    """
    from .solver import ip_step, newton_step

    rng = np.random.default_rng(seed)
    ip_ok = nr_ok = dir_ok = agree_ok = 0
    worst = 0.0
    failures = []
    cfg_ip = SolverConfig(method="ip", tol=residual_tol, init_lambda_mode="given")
    cfg_nr = SolverConfig(method="nr", tol=residual_tol, init_lambda_mode="given")
    for k in range(trials):
        pk = int(p) if p is not None else int(rng.integers(1, p_max + 1))
        qk = int(q) if q is not None else int(rng.integers(1, q_max + 1))
        qp = random_quadratic(pk, qk, cond_max, seed=rng)
        sys_ = qp.system()
        init = ParameterState(rng.standard_normal(pk), rng.standard_normal(qk))
        r_ip = run_solver(sys_, init, cfg_ip)
        r_nr = run_solver(sys_, init, cfg_nr)
        worst = max(worst, r_ip.residual_psi, r_ip.residual_phi)
        good_ip = r_ip.converged and r_ip.iterations <= 2
        good_nr = r_nr.converged and r_nr.iterations == 1
        a = ip_step(sys_, init).theta
        b = newton_step(sys_, init).theta
        good_dir = bool(np.max(np.abs(a - b)) <= 1e-12)
        good_agree = bool(np.max(np.abs(r_ip.final.theta - r_nr.final.theta)) < 10 * residual_tol)
        ip_ok += good_ip
        nr_ok += good_nr
        dir_ok += good_dir
        agree_ok += good_agree
        if not (good_ip and good_nr and good_dir and good_agree):
            failures.append({"trial": k, "p": pk, "q": qk, "ip_iterations": r_ip.iterations,
                             "nr_iterations": r_nr.iterations})
    return QuadcheckResult(trials, ip_ok, nr_ok, dir_ok, agree_ok, worst, failures)
