"""Implicit profiling and baseline solvers for semiparametric estimating equations."""

from .errors import (
    ConvergenceError,
    DivergenceError,
    DomainError,
    ExperimentError,
    SemiprofError,
    SingularMatrixError,
)
from .linalg import QuadraticProblem, fd_jacobian, random_quadratic, schur_F, solve_dense
from .solver import (
    EstimatingSystem,
    ParameterState,
    SolveReport,
    SolverConfig,
    implicit_gradient,
    init_lambda,
    ip_hessian,
    ip_step,
    naive_step,
    newton_step,
    run_solver,
)

__version__ = "0.1.0"
