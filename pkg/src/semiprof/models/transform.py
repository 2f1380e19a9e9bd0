"""Semiparametric transformation model with a kernel-smoothed baseline.

For subject i with follow-up time C_i, event indicator delta_i and covariates
Z_i, ``P(delta_i = 1 | C_i, Z_i) = expit(lam(C_i) + theta'Z_i)``.  The
baseline ``lam`` is represented by its values ``lam_i = lam(C_i)`` at the n
observed follow-up times, so the nuisance block has dimension n:

    phi_i(theta, lam) = n^-1 sum_j K_h(C_j - C_i) [delta_j - expit(lam_i + theta'Z_j)]
    psi(theta, lam)   = n^-1 sum_j Z_j [delta_j - expit(lam_j + theta'Z_j)]

``d phi / d lam`` is diagonal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from ..errors import DomainError, SemiprofError
from ..solver import EstimatingSystem

PAPER_THETA = np.array([0.7, 0.7, 0.7, -0.5, -0.5, -0.5, 0.3, 0.3, 0.3, 0.0])
LAMBDA_BOUND = 30.0


@dataclass(frozen=True)
class TransformData:
    Z: np.ndarray
    C: np.ndarray
    delta: np.ndarray

    def __post_init__(self):
        if self.Z.ndim != 2 or self.Z.shape[0] != self.C.size or self.C.size != self.delta.size:
            raise ValueError("Z must be n x p with C and delta of length n")
        if not np.all(np.isin(self.delta, (0, 1))):
            raise ValueError("delta must be 0/1")

    @property
    def n(self) -> int:
        return self.Z.shape[0]

    @property
    def p(self) -> int:
        return self.Z.shape[1]


@dataclass(frozen=True)
class TransformModelSpec:
    bandwidth_h: float
    kernel: str = "gaussian"

    def __post_init__(self):
        if not self.bandwidth_h > 0:
            raise DomainError("bandwidth must be positive")
        if self.kernel != "gaussian":
            raise ValueError(f"unsupported kernel {self.kernel!r}")

    @classmethod
    def default_for(cls, data: TransformData, h_scale: float = 1.0) -> "TransformModelSpec":
        """Rule-of-thumb bandwidth ``h_scale * sd(C) * n^(-1/5)``."""
        return cls(h_scale * float(np.std(data.C, ddof=1)) * data.n ** (-0.2))


class IsolatedPointError(SemiprofError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"all kernel weights vanish at observation {index}")


def generate_transform_data(n: int, theta_star=PAPER_THETA, seed=None) -> TransformData:
    """Draw ``Z ~ N(0, I)``, ``C ~ U(0, 12)`` and ``T = 4 exp((logit(u) - Z'theta)/3)``."""
    if n < 1:
        raise ValueError("n must be positive")
    theta_star = np.asarray(theta_star, dtype=float)
    rng = np.random.default_rng(seed)
    Z = rng.standard_normal((n, theta_star.size))
    u = rng.uniform(0.0, 1.0, size=n)
    C = rng.uniform(0.0, 12.0, size=n)
    T = event_time(u, Z @ theta_star)
    return TransformData(Z=Z, C=C, delta=(T <= C).astype(float))


def event_time(u, linear_predictor):
    return 4.0 * np.exp((np.log(u) - np.log1p(-u) - linear_predictor) / 3.0)


def kernel_matrix(C, h: float) -> np.ndarray:
    diff = C[None, :] - C[:, None]
    return np.exp(-0.5 * (diff / h) ** 2) / (h * math.sqrt(2.0 * math.pi))


class _Point:
    """Lazily computed quantities at one (theta, lam)."""

    def __init__(self, ev: "_Evaluator", theta, lam):
        self.ev = ev
        self.theta = theta
        self.lam = lam
        self.eta = ev.data.Z @ theta
        self._P = None
        self._KPd = None

    @property
    def P(self):
        # expit(lam_i + eta_j) from an outer product; lam is bounded so exp is safe
        if self._P is None:
            e = np.outer(np.exp(-self.lam), np.exp(-np.clip(self.eta, -600.0, 600.0)))
            self._P = 1.0 / (1.0 + e)
        return self._P

    @property
    def KPd(self):
        if self._KPd is None:
            P = self.P
            self._KPd = self.ev.K * (P - P * P)
        return self._KPd

    @property
    def pdiag(self):
        return expit(self.lam + self.eta)


class _Evaluator:
    """Shared n x n evaluations, cached for the most recent (theta, lam) points."""

    def __init__(self, data: TransformData, spec: TransformModelSpec):
        self.data = data
        self.K = kernel_matrix(data.C, spec.bandwidth_h)
        self.Kdelta = self.K @ data.delta
        self._cache: dict = {}

    def at(self, theta, lam) -> _Point:
        theta = np.asarray(theta, float)
        lam = np.asarray(lam, float)
        key = (theta.tobytes(), lam.tobytes())
        pt = self._cache.get(key)
        if pt is None:
            pt = _Point(self, theta.copy(), lam.copy())
            if len(self._cache) >= 3:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = pt
        return pt

    def phi(self, theta, lam):
        P = self.at(theta, lam).P
        return (self.Kdelta - np.einsum("ij,ij->i", self.K, P)) / self.data.n

    def psi(self, theta, lam):
        pd = self.at(theta, lam).pdiag
        return self.data.Z.T @ (self.data.delta - pd) / self.data.n

    def phi_lambda_diag(self, theta, lam):
        return -self.at(theta, lam).KPd.sum(axis=1) / self.data.n

    def phi_theta(self, theta, lam):
        return -(self.at(theta, lam).KPd @ self.data.Z) / self.data.n

    def _w(self, theta, lam):
        pd = self.at(theta, lam).pdiag
        return pd * (1.0 - pd)

    def psi_theta(self, theta, lam):
        Z = self.data.Z
        return -(Z.T * self._w(theta, lam)) @ Z / self.data.n

    def psi_lambda(self, theta, lam):
        return -(self.data.Z * self._w(theta, lam)[:, None]).T / self.data.n


def transform_system(data: TransformData, spec: TransformModelSpec) -> EstimatingSystem:
    ev = _Evaluator(data, spec)
    wbar = np.clip(ev.Kdelta / ev.K.sum(axis=1), 1e-6, 1 - 1e-6)
    return EstimatingSystem(
        psi=ev.psi,
        phi=ev.phi,
        jac_psi_theta=ev.psi_theta,
        jac_psi_lambda=ev.psi_lambda,
        jac_phi_theta=ev.phi_theta,
        jac_phi_lambda=ev.phi_lambda_diag,
        lambda_jacobian_structure="diagonal",
        lambda_bounds=(-LAMBDA_BOUND, LAMBDA_BOUND),
        lambda_start=logit(wbar),
    )


def transform_implicit_gradient(data: TransformData, spec: TransformModelSpec, theta, lam) -> np.ndarray:
    """Rows ``d_i = -sum_j K_ij pi'_ij Z_j / sum_j K_ij pi'_ij``."""
    theta = np.asarray(theta, float)
    lam = np.asarray(lam, float)
    K = kernel_matrix(data.C, spec.bandwidth_h)
    P = expit(lam[:, None] + (data.Z @ theta)[None, :])
    W = K * (P * (1.0 - P))
    denom = W.sum(axis=1)
    bad = np.flatnonzero(denom == 0.0)
    if bad.size:
        raise IsolatedPointError(int(bad[0]))
    return -(W @ data.Z) / denom[:, None]


def transform_ip_hessian(data: TransformData, spec: TransformModelSpec, theta, lam, d) -> np.ndarray:
    """Profiled Jacobian of the theta score.

    ``-n^-1 [sum_i pi'_i Z_i Z_i' + sum_i pi'_i Z_i d_i']`` with
    ``pi'_i = pi'(lam_i + theta'Z_i)``; the sign and 1/n scaling make it the
    Jacobian of ``psi`` as defined above.
    """
    Z = data.Z
    pd = expit(np.asarray(lam, float) + Z @ np.asarray(theta, float))
    w = pd * (1.0 - pd)
    return -((Z.T * w) @ Z + (Z.T * w) @ np.asarray(d)) / data.n
