"""Acceptance criteria 1 to 7.

Each test prints one ``PASS``/``FAIL`` line for its criterion and then
asserts the same condition.  Run alone with ``pytest tests/test_acceptance.py -s``
or read the lines from the full ``pytest -v`` output.
"""

import time

import numpy as np
import pytest

from semiprof import harness
from semiprof.cli import main
from semiprof.linalg import fd_jacobian
from semiprof.models.garchm import generate_garchm, sigma_recursion
from semiprof.models.toy import toy_step_experiment, toy_system
from semiprof.models.transform import PAPER_THETA, TransformModelSpec, generate_transform_data, transform_system

pytestmark = pytest.mark.acceptance


@pytest.fixture
def emit(capsys):
    def _emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}", flush=True)
    return _emit


def _failed(checks: dict) -> list:
    return [name for name, ok in checks.items() if not ok]


def test_criterion_1_two_step_property(emit):
    t0 = time.perf_counter()
    res = harness.run_quadcheck(trials=500, cond_max=1e3, seed=20240101, p_max=5, q_max=50, residual_tol=1e-10)
    secs = time.perf_counter() - t0
    checks = {
        "ip<=2": res.ip_ok == res.trials,
        "nr==1": res.nr_ok == res.trials,
        "residual<=1e-10": res.max_ip_residual <= 1e-10,
        "runtime<10s": secs < 10,
    }
    emit(1, not _failed(checks),
         f"ip {res.ip_ok}/500, nr {res.nr_ok}/500, max residual {res.max_ip_residual:.2e}, {secs:.1f}s"
         + (f"; failed {_failed(checks)}" if _failed(checks) else ""))
    assert not _failed(checks), res.failures[:5]


def test_criterion_2_method_equivalence(emit):
    t0 = time.perf_counter()
    rep = harness.run_transform_experiment(100, 100, seed=2024, tol=1e-10, max_iter=500, max_failure_rate=1.0)
    secs = time.perf_counter() - t0
    by_rep: dict = {}
    for r in rep.per_rep:
        by_rep.setdefault(r["rep"], {})[r["method"]] = r
    unconverged = sum(not r["converged"] for r in rep.per_rep)
    worst = 0.0
    for d in by_rep.values():
        est = [r["estimates"] for r in d.values() if r["converged"]]
        for i in range(len(est)):
            for j in range(i):
                worst = max(worst, float(np.max(np.abs(est[i] - est[j]))))
    checks = {"all converged": unconverged == 0, "agree<=1e-6": worst <= 1e-6, "runtime<2min": secs < 120}
    emit(2, not _failed(checks),
         f"{len(by_rep)} instances, max pairwise |theta diff| {worst:.2e}, {unconverged} unconverged, {secs:.1f}s"
         + (f"; failed {_failed(checks)}" if _failed(checks) else ""))
    assert not _failed(checks)


def test_criterion_3_toy_step_counts(emit):
    alphas = [round(0.2 * k, 1) for k in range(10)]
    Cs = [float(k * k) for k in range(1, 11)]
    rows = toy_step_experiment(alphas, Cs, tol=1e-6)
    cell = {(r["method"], r["alpha"], r["C"]): r["mean_steps"] for r in rows}

    def grid_mean(method):
        return float(np.mean([cell[(method, a, c)] for a in alphas for c in Cs]))

    nr, ip = grid_mean("newton_raphson"), grid_mean("implicit_profiling")
    naive = np.array([[cell[("naive_iteration", a, c)] for c in Cs] for a in alphas])
    ip_cells = sorted({cell[("implicit_profiling", a, c)] for a in alphas for c in Cs})
    target = naive[alphas.index(1.6), Cs.index(4.0)]
    checks = {
        "nr==1": nr == 1.0,
        "ip==2": ip == 2.0,
        "naive nondecreasing in alpha": bool(np.all(np.diff(naive, axis=0) >= 0)),
        "naive nondecreasing in C": bool(np.all(np.diff(naive, axis=1) >= 0)),
        "naive(1.6,4) in 30+-5": abs(target - 30) <= 5,
    }
    ip_alpha0 = float(np.mean([cell[("implicit_profiling", 0.0, c)] for c in Cs]))
    emit(3, not _failed(checks),
         f"nr mean {nr:.3f}, ip mean {ip:.3f} (cell values {ip_cells}, alpha=0 cells {ip_alpha0:.1f}), "
         f"naive(1.6, 4) {target:.1f}" + (f"; failed {_failed(checks)}" if _failed(checks) else ""))
    assert not _failed(checks)


def _table1(n, threads=1):
    rep = harness.run_transform_experiment(n, 100, seed=500 + n, threads=threads)
    return rep.aggregates


def test_criterion_4_transform_table(emit):
    t0 = time.perf_counter()
    agg500 = _table1(500)
    secs500 = time.perf_counter() - t0
    agg1000 = _table1(1000)
    ip, nr, naive = (agg500[m] for m in ("implicit_profiling", "newton_raphson", "naive_iteration"))

    def same3(aggs, key):
        return len({round(a[key], 3) for a in aggs.values()}) == 1

    def match(aggs, target):
        a = aggs["implicit_profiling"]
        return {k: abs(a[k] - target) <= 0.2 * target for k in ("mse", "rmse_vector")}

    m500, m1000 = match(agg500, 0.462), match(agg1000, 0.324)
    checks = {
        "mse identical to 3dp": same3(agg500, "mse") and same3(agg1000, "mse"),
        "rmse identical to 3dp": same3(agg500, "rmse_vector") and same3(agg1000, "rmse_vector"),
        "0.462 matched": any(m500.values()),
        "0.324 matched": any(m1000.values()),
        "iterations nr<ip<naive": nr["mean_iterations"] < ip["mean_iterations"] < naive["mean_iterations"],
        "time ip<nr": ip["mean_seconds"] < nr["mean_seconds"],
        "all converged": all(a["excluded"] == 0 for a in (*agg500.values(), *agg1000.values())),
        "runtime<15min": secs500 < 900,
    }
    emit(4, not _failed(checks),
         f"n=500 mse {ip['mse']:.4f} rmse {ip['rmse_vector']:.3f} (target 0.462); "
         f"n=1000 mse {agg1000['implicit_profiling']['mse']:.4f} "
         f"rmse {agg1000['implicit_profiling']['rmse_vector']:.3f} (target 0.324); "
         f"iterations nr {nr['mean_iterations']:.2f} ip {ip['mean_iterations']:.2f} "
         f"naive {naive['mean_iterations']:.2f}; seconds ip {ip['mean_seconds']:.3f} nr {nr['mean_seconds']:.3f}; "
         f"n=500 run {secs500:.0f}s" + (f"; failed {_failed(checks)}" if _failed(checks) else ""))
    assert not _failed(checks)


def test_criterion_5_garchm_tables(emit):
    target = np.array([0.0085, 0.0196, 0.0541])
    t0 = time.perf_counter()
    cells = {}
    for setup, T in (("A", 500), ("A", 1000), ("B", 500), ("B", 1000)):
        # failures are counted here and checked against the 5% policy below
        cells[(setup, T)] = harness.run_garchm_experiment(setup, T, 100, seed=7000 + T + (setup == "B"),
                                                          threads=harness.resolve_threads(),
                                                          max_failure_rate=1.0).aggregates
    secs = time.perf_counter() - t0
    a500 = cells[("A", 500)]
    rmse_ip = np.array([a500["ip"]["coords"][c]["rmse"] for c in harness.GARCHM_COORDS])
    rmse_bf_beta = a500["backfit"]["coords"]["beta"]["rmse"]
    within = np.abs(rmse_ip - target) <= 0.4 * target
    iters = {k: (v["ip"]["mean_iterations_all"], v["backfit"]["mean_iterations_all"]) for k, v in cells.items()}
    checks = {
        "ip rmse omega within 40%": bool(within[0]),
        "ip rmse alpha within 40%": bool(within[1]),
        "ip rmse beta within 40%": bool(within[2]),
        "rmse beta ip<backfit": rmse_ip[2] < rmse_bf_beta,
        "iterations ip<backfit in all cells": all(i < b for i, b in iters.values()),
        "failures<=5% in all cells": all(a["failed"] <= 5 for v in cells.values() for a in v.values()),
        "runtime<20min": secs < 1200,
    }
    it_text = ", ".join(f"{s}{T} {i:.1f}/{b:.1f}" for (s, T), (i, b) in iters.items())
    conv = ", ".join(f"{s}{T} {v['ip']['converged']}/{v['backfit']['converged']}" for (s, T), v in cells.items())
    fail = ", ".join(f"{s}{T} {v['ip']['failed']}/{v['backfit']['failed']}" for (s, T), v in cells.items())
    emit(5, not _failed(checks),
         f"A500 ip rmse ({rmse_ip[0]:.4f}, {rmse_ip[1]:.4f}, {rmse_ip[2]:.4f}) vs (0.0085, 0.0196, 0.0541), "
         f"backfit beta rmse {rmse_bf_beta:.4f}; iterations ip/backfit {it_text}; converged ip/backfit {conv}; "
         f"failed ip/backfit {fail}; "
         f"{secs:.0f}s" + (f"; failed {_failed(checks)}" if _failed(checks) else ""))
    assert not _failed(checks)


def _rel_err(analytic, fd):
    analytic, fd = np.atleast_2d(analytic), np.atleast_2d(fd)
    return float(np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-300))


def test_criterion_6_derivative_suite(emit):
    t0 = time.perf_counter()
    rng = np.random.default_rng(66)
    worst = {}

    def record(name, err):
        worst[name] = max(worst.get(name, 0.0), err)

    for _ in range(20):
        a = rng.uniform(-1.9, 1.9)
        s = toy_system(a)
        th, la = rng.standard_normal(1), rng.standard_normal(1)
        record("toy dpsi/dtheta", _rel_err(s.d_psi_theta(th, la), fd_jacobian(lambda t: s.eval_psi(t, la), th)))
        record("toy dpsi/dlambda", _rel_err(s.d_psi_lambda(th, la), fd_jacobian(lambda l: s.eval_psi(th, l), la)))
        record("toy dphi/dtheta", _rel_err(s.d_phi_theta(th, la), fd_jacobian(lambda t: s.eval_phi(t, la), th)))
        record("toy dphi/dlambda",
               _rel_err(np.diag(s.d_phi_lambda(th, la)), fd_jacobian(lambda l: s.eval_phi(th, l), la)))

    data = generate_transform_data(30, PAPER_THETA, seed=6)
    ts = transform_system(data, TransformModelSpec.default_for(data))
    for _ in range(20):
        th, la = 0.3 * rng.standard_normal(data.p), rng.standard_normal(data.n)
        record("transform dpsi/dtheta",
               _rel_err(ts.d_psi_theta(th, la), fd_jacobian(lambda t: ts.eval_psi(t, la), th, 1e-5)))
        record("transform dpsi/dlambda",
               _rel_err(ts.d_psi_lambda(th, la), fd_jacobian(lambda l: ts.eval_psi(th, l), la, 1e-5)))
        record("transform dphi/dtheta",
               _rel_err(ts.d_phi_theta(th, la), fd_jacobian(lambda t: ts.eval_phi(t, la), th, 1e-5)))
        record("transform dphi/dlambda",
               _rel_err(np.diag(ts.d_phi_lambda(th, la)), fd_jacobian(lambda l: ts.eval_phi(th, l), la, 1e-5)))

    y = generate_garchm("A", 500, seed=6).y
    for _ in range(20):
        b = rng.uniform(0.2, 0.85)
        th = np.array([rng.uniform(0.002, 0.05), rng.uniform(0.0, 0.95 - b), b])
        _, sens = sigma_recursion(th, y)
        record("garchm dsigma2/dtheta", _rel_err(sens, fd_jacobian(lambda t: sigma_recursion(t, y)[0], th, 1e-6)))
    secs = time.perf_counter() - t0
    bad = [k for k, v in worst.items() if v > 1e-5]
    ok = not bad and secs < 60
    emit(6, ok, f"{len(worst)} blocks x 20 points, worst relative error {max(worst.values()):.1e} "
                f"({max(worst, key=worst.get)}), {secs:.1f}s" + (f"; failed {bad}" if bad else ""))
    assert ok, worst


def _run_cli(tmp_path, name, argv):
    path = tmp_path / name
    assert main(argv + ["--out", str(path)]) == 0
    return path.read_bytes()


def test_criterion_7_determinism(emit, tmp_path):
    runs = {
        "transform": ["transform", "--n", "100", "--reps", "6", "--seed", "77", "--no-timing"],
        "garchm": ["garchm", "--setup", "B", "--t", "300", "--reps", "4", "--seed", "77", "--no-timing"],
        "toy": ["toy", "--alpha-grid", "0:1.8:0.6", "--c-grid", "1,4"],
    }
    same = {}
    for name, argv in runs.items():
        outs = {th: _run_cli(tmp_path, f"{name}{th}.csv", argv + ["--threads", th]) for th in ("1", "2", "3")}
        same[name] = len(set(outs.values())) == 1
    bad = [k for k, v in same.items() if not v]
    emit(7, not bad, "per-replicate CSV bytes identical for --threads 1, 2, 3 in "
                     + ", ".join(runs) + (f"; differs: {bad}" if bad else ""))
    assert not bad
