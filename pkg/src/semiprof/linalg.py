"""Dense solves, finite-difference Jacobians and quadratic test problems."""

from __future__ import annotations

from dataclasses import dataclass

import warnings

import numpy as np
import scipy.linalg

from .errors import SingularMatrixError

__all__ = [
    "QuadraticProblem",
    "fd_jacobian",
    "random_quadratic",
    "schur_F",
    "solve_dense",
]

_PIVOT_RTOL = 1e-14


def solve_dense(A, b, *, name: str = "matrix"):
    """Solve ``A x = b`` by LU with partial pivoting.

    ``b`` may be a vector or a matrix of right-hand sides.  A pivot smaller
    than ``1e-14 * ||A||_inf`` is treated as exact singularity.
    """
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"{name} must be square, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError(f"{name} has non-finite entries")
    scale = np.max(np.sum(np.abs(A), axis=1)) if A.size else 0.0
    if scale == 0.0:
        raise SingularMatrixError(name)
    with warnings.catch_warnings():
        # exact singularity is reported by the pivot check below
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(A, check_finite=False)
    if np.min(np.abs(np.diag(lu))) < _PIVOT_RTOL * scale:
        raise SingularMatrixError(name)
    return scipy.linalg.lu_solve((lu, piv), b, check_finite=False)


def fd_jacobian(f, x, step: float = 1e-6, steps=None):
    """Central-difference Jacobian of ``f`` at ``x``.

    Column j uses the step ``h_j = step * max(1, |x_j|)``, or ``steps[j]``
    when per-coordinate steps are given.
    """
    x = np.asarray(x, dtype=float)
    h = step * np.maximum(1.0, np.abs(x)) if steps is None else np.broadcast_to(np.asarray(steps, float), x.shape)
    if np.any(h <= 0):
        raise ValueError("finite-difference steps must be positive")
    cols = []
    for j in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[j] += h[j]
        xm[j] -= h[j]
        fp = np.atleast_1d(np.asarray(f(xp), dtype=float))
        fm = np.atleast_1d(np.asarray(f(xm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(
                f"non-finite function value while differencing coordinate {j}"
            )
        cols.append((fp - fm) / (2.0 * h[j]))
    return np.column_stack(cols)


@dataclass(frozen=True)
class QuadraticProblem:
    """Blocks of ``Q(beta) = g'beta + beta'H beta / 2`` split as (theta, lambda)."""

    g1: np.ndarray
    g2: np.ndarray
    H11: np.ndarray
    H12: np.ndarray
    H21: np.ndarray
    H22: np.ndarray

    @property
    def p(self) -> int:
        return self.g1.size

    @property
    def q(self) -> int:
        return self.g2.size

    @property
    def g(self) -> np.ndarray:
        return np.concatenate([self.g1, self.g2])

    @property
    def H(self) -> np.ndarray:
        return np.block([[self.H11, self.H12], [self.H21, self.H22]])

    def minimizer(self) -> np.ndarray:
        return -np.linalg.solve(self.H, self.g)

    def system(self):
        """The gradient of ``Q`` as a two-block estimating system."""
        from .solver import EstimatingSystem

        return EstimatingSystem(
            psi=lambda th, la: self.g1 + self.H11 @ th + self.H12 @ la,
            phi=lambda th, la: self.g2 + self.H21 @ th + self.H22 @ la,
            jac_psi_theta=lambda th, la: self.H11,
            jac_psi_lambda=lambda th, la: self.H12,
            jac_phi_theta=lambda th, la: self.H21,
            jac_phi_lambda=lambda th, la: self.H22,
        )


def random_quadratic(p: int, q: int, cond_max: float = 1e3, seed=None) -> QuadraticProblem:
    """Random strictly convex quadratic with condition number at most ``cond_max``.

    ``H = Q diag(e) Q'`` with Haar-random orthogonal ``Q`` and eigenvalues
    log-uniform on ``[1, cond_max]``; ``g`` is standard normal.
    """
    if p < 1 or q < 1:
        raise ValueError("p and q must be positive")
    if cond_max < 1:
        raise ValueError("cond_max must be >= 1")
    rng = np.random.default_rng(seed)
    n = p + q
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    eig = np.exp(rng.uniform(0.0, np.log(cond_max), size=n))
    H = (Q * eig) @ Q.T
    H = 0.5 * (H + H.T)
    g = rng.standard_normal(n)
    return QuadraticProblem(
        g1=g[:p],
        g2=g[p:],
        H11=H[:p, :p].copy(),
        H12=H[:p, p:].copy(),
        H21=H[p:, :p].copy(),
        H22=H[p:, p:].copy(),
    )


def schur_F(qp: QuadraticProblem) -> np.ndarray:
    """``F = (H11 - H12 H22^-1 H21)^-1``."""
    S = qp.H11 - qp.H12 @ solve_dense(qp.H22, qp.H21, name="H22")
    return solve_dense(S, np.eye(qp.p), name="Schur complement")
