"""Two-parameter quadratic ``L(x, y) = x^2 + y^2 + alpha*x*y``.

``x`` plays the parameter of interest and ``y`` the nuisance parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import DomainError
from ..solver import EstimatingSystem, ParameterState, SolverConfig, run_solver

METHODS = ("newton_raphson", "naive_iteration", "implicit_profiling")


@dataclass(frozen=True)
class ToyProblem:
    alpha: float

    def __post_init__(self):
        if not abs(self.alpha) < 2:
            raise DomainError(f"alpha must lie in (-2, 2), got {self.alpha}")

    def loss(self, x, y):
        return x * x + y * y + self.alpha * x * y


@dataclass(frozen=True)
class ToyInitGrid:
    C_values: tuple = tuple(float(k * k) for k in range(1, 11))
    gamma_values: tuple = field(default_factory=lambda: tuple(2 * math.pi * k / 10 for k in range(1, 11)))

    def __post_init__(self):
        if len(self.gamma_values) != 10:
            raise ValueError("the grid uses exactly 10 angles per C")
        if any(c <= 0 for c in self.C_values):
            raise ValueError("C values must be positive")

    def __len__(self):
        return len(self.C_values) * len(self.gamma_values)


def toy_system(alpha: float) -> EstimatingSystem:
    a = ToyProblem(alpha).alpha
    return EstimatingSystem(
        psi=lambda th, la: 2.0 * th + a * la,
        phi=lambda th, la: 2.0 * la + a * th,
        jac_psi_theta=lambda th, la: np.array([[2.0]]),
        jac_psi_lambda=lambda th, la: np.array([[a]]),
        jac_phi_theta=lambda th, la: np.array([[a]]),
        jac_phi_lambda=lambda th, la: np.array([2.0]),
        lambda_jacobian_structure="diagonal",
        lambda_start=np.zeros(1),
    )


def toy_initial_point(alpha: float, C: float, gamma: float) -> tuple[float, float]:
    """Starting point on the contour ``L(x, y) = C``."""
    ToyProblem(alpha)
    if not C > 0:
        raise DomainError("C must be positive")
    s = math.sqrt(2.0 - alpha * alpha / 2.0)
    a = math.sqrt(C * (1.0 - alpha / 2.0)) * math.cos(gamma)
    b = math.sqrt(C * (1.0 + alpha / 2.0)) * math.sin(gamma)
    return (a + b) / s, (a - b) / s


def toy_solve(alpha: float, x0: float, y0: float, method: str, tol: float = 1e-6, max_iter: int = 500):
    cfg = SolverConfig(method=method, tol=tol, max_iter=max_iter, init_lambda_mode="given")
    return run_solver(toy_system(alpha), ParameterState([x0], [y0]), cfg)


def toy_step_experiment(alpha_grid, C_grid=None, tol: float = 1e-6, methods=METHODS,
                        gamma_values=None, max_iter: int = 500) -> list[dict]:
    """Mean iteration count per (method, alpha, C) over the ten starting angles.

    Returns rows ``{"method", "alpha", "C", "mean_steps"}`` ordered by method,
    then alpha, then C.
    """
    grid = ToyInitGrid() if C_grid is None else ToyInitGrid(C_values=tuple(C_grid))
    gammas = grid.gamma_values if gamma_values is None else tuple(gamma_values)
    alpha_grid = list(alpha_grid)
    if not alpha_grid or not grid.C_values:
        raise ValueError("grids must be non-empty")
    rows = []
    for method in methods:
        for alpha in alpha_grid:
            for C in grid.C_values:
                steps = []
                for g in gammas:
                    x0, y0 = toy_initial_point(alpha, C, g)
                    steps.append(toy_solve(alpha, x0, y0, method, tol, max_iter).iterations)
                rows.append({"method": method, "alpha": float(alpha), "C": float(C),
                             "mean_steps": float(np.mean(steps))})
    return rows


def mean_steps_by(rows, key: str) -> dict:
    """Average the cell means over the other grid axis: ``{(method, key_value): mean}``."""
    acc: dict = {}
    for r in rows:
        acc.setdefault((r["method"], r[key]), []).append(r["mean_steps"])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def convergence_path(alpha: float, C: float, gamma: float, method: str, tol: float = 1e-6) -> list[dict]:
    """Iterates ``(x, y)`` from the starting point (step 0) to convergence."""
    x0, y0 = toy_initial_point(alpha, C, gamma)
    rep = toy_solve(alpha, x0, y0, method, tol)
    path = [{"method": method, "step_index": 0, "x": x0, "y": y0}]
    for i, rec in enumerate(rep.trace, start=1):
        path.append({"method": method, "step_index": i, "x": float(rec.theta[0]), "y": float(rec.lam[0])})
    return path
