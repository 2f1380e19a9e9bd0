"""Solver engine for two-block estimating systems.

A system is a pair of estimating equations ``psi(theta, lam) = 0`` (p
equations for the parameter of interest) and ``phi(theta, lam) = 0`` (q
equations for the nuisance block).  Three drivers are provided:

* implicit profiling: Newton step on ``lam`` followed by a Newton step on
  ``theta`` whose Jacobian includes the chain term through ``lam(theta)``;
* Newton-Raphson on the stacked vector ``(theta, lam)``;
* naive iteration: the same two block steps with the cross terms dropped.

All steps are root-finding Newton steps ``x+ = x - J^-1 f``.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ConvergenceError, DivergenceError, SingularMatrixError
from .linalg import fd_jacobian, solve_dense

__all__ = [
    "EstimatingSystem",
    "ParameterState",
    "SolveReport",
    "SolverConfig",
    "TraceRecord",
    "implicit_gradient",
    "init_lambda",
    "ip_hessian",
    "ip_step",
    "naive_step",
    "newton_step",
    "run_solver",
]

METHODS = ("implicit_profiling", "newton_raphson", "naive_iteration")
_ALIASES = {
    "ip": "implicit_profiling",
    "nr": "newton_raphson",
    "newton": "newton_raphson",
    "naive": "naive_iteration",
}


def canonical_method(name: str) -> str:
    name = _ALIASES.get(name.lower(), name.lower())
    if name not in METHODS:
        raise ValueError(f"unknown method {name!r}; expected one of {METHODS}")
    return name


@dataclass
class ParameterState:
    theta: np.ndarray
    lam: np.ndarray

    def __post_init__(self):
        self.theta = np.atleast_1d(np.asarray(self.theta, dtype=float)).copy()
        self.lam = np.atleast_1d(np.asarray(self.lam, dtype=float)).copy()
        if self.theta.ndim != 1 or self.lam.ndim != 1:
            raise ValueError("theta and lambda must be vectors")
        if self.theta.size < 1 or self.lam.size < 1:
            raise ValueError("theta and lambda must be non-empty")

    @property
    def p(self) -> int:
        return self.theta.size

    @property
    def q(self) -> int:
        return self.lam.size

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([self.theta, self.lam])

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.lam)))


@dataclass
class EstimatingSystem:
    """Callback bundle for ``psi`` (theta block) and ``phi`` (lambda block).

    Missing Jacobian callbacks are replaced by central finite differences.
    With ``lambda_jacobian_structure="diagonal"`` the ``jac_phi_lambda``
    callback may return just the diagonal as a 1-D array.
    ``lambda_bounds`` clips lambda after every lambda update and
    ``lambda_start`` is the default starting guess for :func:`init_lambda`.
    """

    psi: Callable
    phi: Callable
    jac_psi_theta: Optional[Callable] = None
    jac_psi_lambda: Optional[Callable] = None
    jac_phi_theta: Optional[Callable] = None
    jac_phi_lambda: Optional[Callable] = None
    lambda_jacobian_structure: str = "dense"
    lambda_bounds: Optional[tuple] = None
    lambda_start: Optional[np.ndarray] = None
    fd_step: float = 1e-6

    def __post_init__(self):
        if self.lambda_jacobian_structure not in ("dense", "diagonal"):
            raise ValueError("lambda_jacobian_structure must be 'dense' or 'diagonal'")

    # residuals -----------------------------------------------------------

    def eval_psi(self, theta, lam) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.psi(theta, lam), dtype=float))

    def eval_phi(self, theta, lam) -> np.ndarray:
        return np.atleast_1d(np.asarray(self.phi(theta, lam), dtype=float))

    # Jacobian blocks -----------------------------------------------------

    def d_psi_theta(self, theta, lam) -> np.ndarray:
        if self.jac_psi_theta is not None:
            return np.atleast_2d(np.asarray(self.jac_psi_theta(theta, lam), dtype=float))
        return fd_jacobian(lambda t: self.eval_psi(t, lam), theta, self.fd_step)

    def d_psi_lambda(self, theta, lam) -> np.ndarray:
        if self.jac_psi_lambda is not None:
            return np.atleast_2d(np.asarray(self.jac_psi_lambda(theta, lam), dtype=float))
        return fd_jacobian(lambda l: self.eval_psi(theta, l), lam, self.fd_step)

    def d_phi_theta(self, theta, lam) -> np.ndarray:
        if self.jac_phi_theta is not None:
            J = np.asarray(self.jac_phi_theta(theta, lam), dtype=float)
            return J.reshape(np.size(lam), np.size(theta))
        return fd_jacobian(lambda t: self.eval_phi(t, lam), theta, self.fd_step)

    def d_phi_lambda(self, theta, lam) -> np.ndarray:
        """Jacobian of phi in lambda; a 1-D diagonal when declared diagonal."""
        diagonal = self.lambda_jacobian_structure == "diagonal"
        if self.jac_phi_lambda is not None:
            J = np.asarray(self.jac_phi_lambda(theta, lam), dtype=float)
            if J.ndim <= 1:
                if diagonal:
                    return J.reshape(-1)
                if J.size != 1:
                    raise ValueError("1-D d(phi)/d(lambda) requires diagonal structure")
                return J.reshape(1, 1)
            if diagonal:
                off = J - np.diag(np.diag(J))
                if np.any(off != 0.0):
                    raise ValueError("declared diagonal d(phi)/d(lambda) has off-diagonal entries")
                return np.diag(J).copy()
            return J
        J = fd_jacobian(lambda l: self.eval_phi(theta, l), lam, self.fd_step)
        return np.diag(J).copy() if diagonal else J

    def clip_lambda(self, lam: np.ndarray) -> np.ndarray:
        if self.lambda_bounds is None:
            return lam
        return np.clip(lam, *self.lambda_bounds)


@dataclass
class SolverConfig:
    method: str = "implicit_profiling"
    tol: float = 1e-8
    max_iter: int = 200
    fd_step: float = 1e-6
    init_lambda_mode: str = "solve_phi"
    init_lambda_max_iter: int = 50

    def __post_init__(self):
        self.method = canonical_method(self.method)
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")
        if self.init_lambda_mode not in ("solve_phi", "given"):
            raise ValueError("init_lambda_mode must be 'solve_phi' or 'given'")
        if self.init_lambda_max_iter < 1:
            raise ValueError("init_lambda_max_iter must be >= 1")


@dataclass
class TraceRecord:
    theta: np.ndarray
    lam: np.ndarray
    residual_psi: float
    residual_phi: float
    seconds: float


@dataclass
class SolveReport:
    final: ParameterState
    converged: bool
    iterations: int
    residual_psi: float
    residual_phi: float
    trace: list = field(default_factory=list)
    total_time: float = 0.0
    method: str = ""


def _inf_norm(v) -> float:
    v = np.asarray(v, dtype=float)
    return float(np.max(np.abs(v))) if v.size else 0.0


def _lambda_newton(system: EstimatingSystem, theta, lam):
    """One Newton step on phi in lambda with theta fixed."""
    phi = system.eval_phi(theta, lam)
    J = system.d_phi_lambda(theta, lam)
    if J.ndim == 1:
        if np.any(J == 0.0) or not np.all(np.isfinite(J)):
            raise SingularMatrixError("d(phi)/d(lambda)", "zero diagonal entry")
        delta = phi / J
    else:
        delta = solve_dense(J, phi, name="d(phi)/d(lambda)")
    return system.clip_lambda(lam - delta)


def init_lambda(system: EstimatingSystem, theta0, cfg: SolverConfig, lam_start=None) -> np.ndarray:
    """Solve ``phi(theta0, lam) = 0`` for lambda by Newton iteration in lambda.

    The starting guess is ``lam_start``, else ``system.lambda_start``.
    Raises ``ConvergenceError`` (carrying the best iterate) when the residual
    does not reach ``cfg.tol`` within ``cfg.init_lambda_max_iter`` steps.
    """
    theta0 = np.atleast_1d(np.asarray(theta0, dtype=float))
    if not np.all(np.isfinite(theta0)):
        raise ValueError("theta0 must be finite")
    if lam_start is None:
        lam_start = system.lambda_start
    if lam_start is None:
        raise ValueError("no starting lambda: pass lam_start or set system.lambda_start")
    lam = system.clip_lambda(np.atleast_1d(np.asarray(lam_start, dtype=float)).copy())
    best = lam.copy()
    best_res = _inf_norm(system.eval_phi(theta0, lam))
    for _ in range(cfg.init_lambda_max_iter):
        if best_res <= cfg.tol:
            break
        lam = _lambda_newton(system, theta0, lam)
        res = _inf_norm(system.eval_phi(theta0, lam))
        if not np.isfinite(res):
            break
        if res < best_res:
            best, best_res = lam.copy(), res
    if best_res > cfg.tol:
        raise ConvergenceError(
            f"lambda initialisation did not converge (|phi|={best_res:.3g})", best=best
        )
    return best


def naive_step(system: EstimatingSystem, state: ParameterState) -> ParameterState:
    """Block Newton sweep ignoring the cross Jacobians.

    lambda is updated at ``(theta, lam)``, then theta at ``(theta, lam+)``.
    """
    th, la = state.theta, state.lam
    la_new = _lambda_newton(system, th, la)
    psi = system.eval_psi(th, la_new)
    J = system.d_psi_theta(th, la_new)
    th_new = th - solve_dense(J, psi, name="d(psi)/d(theta)")
    return ParameterState(th_new, la_new)


def stacked_jacobian(system: EstimatingSystem, theta, lam) -> np.ndarray:
    """Full ``(p+q) x (p+q)`` Jacobian of ``G = (psi, phi)``."""
    A = system.d_psi_theta(theta, lam)
    B = system.d_psi_lambda(theta, lam)
    C = system.d_phi_theta(theta, lam)
    D = system.d_phi_lambda(theta, lam)
    if D.ndim == 1:
        D = np.diag(D)
    return np.block([[A, B], [C, D]])


def newton_step(system: EstimatingSystem, state: ParameterState) -> ParameterState:
    """One Newton-Raphson step on the stacked vector ``beta = (theta, lam)``."""
    th, la = state.theta, state.lam
    G = np.concatenate([system.eval_psi(th, la), system.eval_phi(th, la)])
    J = stacked_jacobian(system, th, la)
    beta = state.beta - solve_dense(J, G, name="stacked Jacobian dG/dbeta")
    p = state.p
    return ParameterState(beta[:p], system.clip_lambda(beta[p:]))


def implicit_gradient(system: EstimatingSystem, state: ParameterState) -> np.ndarray:
    """``d = d lam / d theta`` from ``dphi/dlam @ d = -dphi/dtheta`` (q x p)."""
    th, la = state.theta, state.lam
    C = system.d_phi_theta(th, la)
    D = system.d_phi_lambda(th, la)
    if D.ndim == 1:
        if np.any(D == 0.0):
            raise SingularMatrixError("d(phi)/d(lambda)", "zero diagonal entry")
        return -C / D[:, None]
    return -solve_dense(D, C, name="d(phi)/d(lambda)")


def ip_hessian(system: EstimatingSystem, state: ParameterState, d) -> np.ndarray:
    """Total derivative of psi along the profile: ``dpsi/dtheta + dpsi/dlam @ d``."""
    th, la = state.theta, state.lam
    return system.d_psi_theta(th, la) + system.d_psi_lambda(th, la) @ np.asarray(d)


def ip_step(system: EstimatingSystem, state: ParameterState) -> ParameterState:
    """One implicit profiling sweep.

    Newton step in lambda at ``(theta, lam)``; the implicit gradient, the
    profiled Jacobian and psi are then all evaluated at ``(theta, lam+)``.
    """
    th = state.theta
    la_new = _lambda_newton(system, th, state.lam)
    mid = ParameterState(th, la_new)
    d = implicit_gradient(system, mid)
    H = ip_hessian(system, mid, d)
    psi = system.eval_psi(th, la_new)
    th_new = th - solve_dense(H, psi, name="implicit profiling Hessian")
    return ParameterState(th_new, la_new)


_STEPS = {
    "implicit_profiling": ip_step,
    "newton_raphson": newton_step,
    "naive_iteration": naive_step,
}


def run_solver(system: EstimatingSystem, init: ParameterState, cfg: SolverConfig) -> SolveReport:
    """Iterate the configured step until both residual norms are <= ``cfg.tol``.

    One iteration is one stacked step (Newton-Raphson) or one lambda-then-theta
    sweep (implicit profiling, naive iteration).  Exhausting ``max_iter``
    returns an unconverged report; a non-finite iterate raises
    ``DivergenceError`` carrying the last finite state.
    """
    step = _STEPS[cfg.method]
    t_start = time.perf_counter()
    if system.fd_step != cfg.fd_step:
        system = dataclasses.replace(system, fd_step=cfg.fd_step)
    state = ParameterState(init.theta, init.lam)
    if not state.is_finite():
        raise ValueError("initial state must be finite")
    if cfg.init_lambda_mode == "solve_phi":
        state = ParameterState(state.theta, init_lambda(system, state.theta, cfg, state.lam))

    def residuals(s):
        return (
            _inf_norm(system.eval_psi(s.theta, s.lam)),
            _inf_norm(system.eval_phi(s.theta, s.lam)),
        )

    r_psi, r_phi = residuals(state)
    trace = []
    while not (r_psi <= cfg.tol and r_phi <= cfg.tol) and len(trace) < cfg.max_iter:
        t0 = time.perf_counter()
        new = step(system, state)
        if not new.is_finite():
            raise DivergenceError(f"{cfg.method}: non-finite iterate", state=state)
        r_psi, r_phi = residuals(new)
        if not (np.isfinite(r_psi) and np.isfinite(r_phi)):
            raise DivergenceError(f"{cfg.method}: non-finite residual", state=state)
        state = new
        trace.append(
            TraceRecord(state.theta.copy(), state.lam.copy(), r_psi, r_phi, time.perf_counter() - t0)
        )
    return SolveReport(
        final=state,
        converged=bool(r_psi <= cfg.tol and r_phi <= cfg.tol),
        iterations=len(trace),
        residual_psi=r_psi,
        residual_phi=r_phi,
        trace=trace,
        total_time=time.perf_counter() - t_start,
        method=cfg.method,
    )
