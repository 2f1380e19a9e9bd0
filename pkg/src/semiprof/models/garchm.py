"""Semiparametric GARCH-in-mean model.

    y_t       = lam(sigma_t^2) + eps_t
    sigma_t^2 = omega + alpha * y_{t-1}^2 + beta * sigma_{t-1}^2

``lam`` is approximated by a B-spline (quadratic by default) fitted by least
squares to ``(sigma_t^2(theta), y_t)``, so the profile ``lam_hat_theta`` is
explicit.  The estimating equation for ``theta = (omega, alpha, beta)`` is
the gradient of the negative Gaussian quasi-likelihood with ``lam_hat_theta``
plugged in.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import BSpline
from scipy.signal import lfilter

from ..errors import ConvergenceError, DivergenceError, DomainError, SemiprofError, SingularMatrixError
from ..linalg import fd_jacobian, solve_dense
from ..solver import ParameterState, SolveReport, SolverConfig, TraceRecord

SETUPS = ("A", "B")
PAPER_THETA = {"A": (0.01, 0.1, 0.68), "B": (0.01, 0.1, 0.80)}
GARCHM_METHODS = ("ip", "backfit")
DEFAULT_DEGREE = 2


@dataclass(frozen=True)
class GarchTheta:
    omega: float
    alpha: float
    beta: float

    def __post_init__(self):
        if not is_admissible(self.as_array()):
            raise DomainError(f"non-stationary or invalid GARCH parameters {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.omega, self.alpha, self.beta], dtype=float)

    @classmethod
    def from_array(cls, a) -> "GarchTheta":
        return cls(*map(float, a))


def is_admissible(theta) -> bool:
    w, a, b = theta
    return bool(np.all(np.isfinite(theta)) and w > 0 and a >= 0 and b >= 0 and a + b < 1)


@dataclass(frozen=True)
class GarchSeries:
    y: np.ndarray
    sigma2: np.ndarray = None

    @property
    def T(self) -> int:
        return self.y.size


def mean_function(setup: str, s2):
    if setup == "A":
        return s2 + 0.5 * np.sin(10.0 * s2)
    if setup == "B":
        return 0.5 * s2 + 0.1 * np.sin(0.5 + 20.0 * s2)
    raise ValueError(f"unknown setup {setup!r}")


MAX_SIGMA2 = 1e6


class ExplosivePathError(SemiprofError):
    pass


def generate_garchm(setup: str, T: int, theta_star=None, sigma_noise="conditional", seed=None,
                    burn_in: int = 500) -> GarchSeries:
    """Simulate setup A or B and drop the first ``burn_in`` points.

    ``sigma_noise`` scales the standard normal innovation; the string
    ``"conditional"`` uses ``sigma_t`` instead (innovation variance equal to
    the GARCH variance).  A path whose variance passes ``MAX_SIGMA2``
    raises :class:`ExplosivePathError`.
    """
    if setup not in SETUPS:
        raise ValueError(f"setup must be one of {SETUPS}")
    if T < 50:
        raise ValueError("T must be at least 50")
    th = GarchTheta(*(PAPER_THETA[setup] if theta_star is None else theta_star))
    w, a, b = th.as_array()
    rng = np.random.default_rng(seed)
    n = T + burn_in
    eps = rng.standard_normal(n)
    y = np.empty(n)
    s2 = np.empty(n)
    s2[0] = w / (1.0 - a - b)
    for t in range(n):
        if t > 0:
            s2[t] = w + a * y[t - 1] ** 2 + b * s2[t - 1]
        scale = math.sqrt(s2[t]) if sigma_noise == "conditional" else float(sigma_noise)
        y[t] = mean_function(setup, s2[t]) + scale * eps[t]
        # the mean feeds y^2 back into sigma^2, so a large shock can run away
        if not s2[t] < MAX_SIGMA2:
            raise ExplosivePathError(f"simulated sigma^2 exceeded {MAX_SIGMA2:g} at t={t}")
    return GarchSeries(y=y[burn_in:].copy(), sigma2=s2[burn_in:].copy())


def sigma_recursion(theta, y):
    """Variance path and its sensitivities ``d sigma_t^2 / d theta`` (T x 3).

    The recursion starts from the unconditional variance ``omega/(1-alpha-beta)``.
    """
    theta = np.asarray(theta, dtype=float)
    w, a, b = theta
    # slightly outside the admissible region is allowed (finite differences at the boundary)
    if not (np.all(np.isfinite(theta)) and w > 0 and abs(b) < 1 and a + b < 1):
        raise DomainError(f"theta {theta} does not define a variance recursion")
    y = np.asarray(y, dtype=float)
    T = y.size
    c = 1.0 - a - b
    ysq = y * y
    # x_t - b*x_{t-1} = forcing_t, with the t=0 value as the first forcing term
    filt = ([1.0], [1.0, -b])
    s2 = lfilter(*filt, np.concatenate([[w / c], w + a * ysq[:-1]]))
    forcing = np.empty((3, T))
    forcing[:, 0] = (1.0 / c, w / c**2, w / c**2)
    forcing[0, 1:] = 1.0
    forcing[1, 1:] = ysq[:-1]
    forcing[2, 1:] = s2[:-1]
    sens = lfilter(*filt, forcing, axis=1).T
    if np.any(s2 <= 0):
        raise SemiprofError("non-positive conditional variance")
    return s2, sens


def n_knots(T: int) -> int:
    """Interior knot count ``ceil(T^(3/20))``."""
    return int(math.ceil(T ** 0.15 - 1e-12))


class SplineFitError(SemiprofError):
    pass


@dataclass
class SplineFit:
    """Least-squares B-spline ``lam_hat`` on equally spaced breakpoints.

    ``knots`` are the breakpoints (both ends included); the full knot vector
    is clamped at the ends.  Outside the breakpoint span the boundary
    polynomial piece is extended and ``extrapolated`` counts such points.
    """

    knots: np.ndarray
    gamma: np.ndarray
    degree: int = 1
    extrapolated: int = field(default=0, compare=False)

    def __post_init__(self):
        self._spl = BSpline(full_knot_vector(self.knots, self.degree), self.gamma, self.degree,
                            extrapolate=True)
        self._dspl = self._spl.derivative()

    def _count(self, x):
        self.extrapolated += int(np.count_nonzero((x < self.knots[0]) | (x > self.knots[-1])))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        self._count(x)
        return self._spl(x)

    def derivative(self, x):
        x = np.asarray(x, dtype=float)
        self._count(x)
        return self._dspl(x)


def full_knot_vector(breaks, degree: int) -> np.ndarray:
    return np.concatenate([[breaks[0]] * degree, breaks, [breaks[-1]] * degree])


def bspline_design(x, breaks, degree: int = 1) -> np.ndarray:
    """B-spline design matrix, one column per basis function (``len(breaks) + degree - 1``)."""
    x = np.asarray(x, dtype=float)
    t = full_knot_vector(breaks, degree)
    # the right end belongs to the last interval
    xc = np.minimum(x, np.nextafter(breaks[-1], -np.inf))
    return BSpline.design_matrix(xc, t, degree).toarray()


def fit_lambda_spline(sigma2, y, R_T: int, degree: int = DEFAULT_DEGREE, jitter: float = 1e-10) -> SplineFit:
    """Least-squares spline of ``y`` on ``sigma2`` with ``R_T`` interior knots.

    Breakpoints are equally spaced over ``[min sigma2, max sigma2]``; the
    normal equations carry a ``jitter`` ridge on the diagonal.
    """
    sigma2 = np.asarray(sigma2, dtype=float)
    y = np.asarray(y, dtype=float)
    if degree < 1:
        raise ValueError("degree must be >= 1")
    if sigma2.size <= R_T + degree + 1:
        raise ValueError("need more observations than basis functions")
    a, b = float(sigma2.min()), float(sigma2.max())
    if not b > a:
        raise SplineFitError("sigma^2 has zero range")
    breaks = np.linspace(a, b, R_T + 2)
    X = bspline_design(sigma2, breaks, degree)
    if np.any(X.sum(axis=0) == 0):
        counts, _ = np.histogram(sigma2, bins=breaks)
        empty = np.flatnonzero(counts == 0).tolist()
        raise SplineFitError(f"basis functions without data; empty knot intervals {empty}")
    XtX = X.T @ X
    XtX[np.diag_indices_from(XtX)] += jitter
    try:
        gamma = solve_dense(XtX, X.T @ y, name="spline normal equations")
    except SingularMatrixError as exc:
        raise SplineFitError("rank-deficient spline basis") from exc
    return SplineFit(knots=breaks, gamma=gamma, degree=degree)


def garchm_score(theta, y, fit: SplineFit) -> np.ndarray:
    """``psi_1 - psi_2``: gradient of the negative quasi-likelihood with ``fit`` held fixed."""
    s2, sens = sigma_recursion(theta, y)
    resid = y - fit(s2)
    psi1 = 0.5 * ((1.0 / s2 - resid**2 / s2**2) @ sens)
    psi2 = (resid / s2 * fit.derivative(s2)) @ sens
    return psi1 - psi2


def quasi_loglik(theta, y, fit: SplineFit) -> float:
    s2, _ = sigma_recursion(theta, y)
    resid = y - fit(s2)
    return float(-0.5 * np.sum(np.log(s2)) - 0.5 * np.sum(resid**2 / s2))


def refit(theta, y, R_T: int, degree: int = DEFAULT_DEGREE) -> SplineFit:
    s2, _ = sigma_recursion(theta, y)
    return fit_lambda_spline(s2, y, R_T, degree)


def fitted_value_sensitivity(s2, sens, y, fit: SplineFit, jitter: float = 1e-10) -> np.ndarray:
    """``d lam_hat_theta(sigma_t^2(theta)) / d theta`` for the refitted spline (T x 3).

    The fitted value moves with theta through ``sigma_t^2``, through the
    breakpoints (which track ``min`` and ``max`` of ``sigma^2``) and through
    the least-squares coefficients.  With ``u_t = (sigma_t^2 - a)/(b - a)`` the
    basis is a fixed function of ``u``, so ``dX = B'(sigma^2) * w`` with
    ``w_t = ds_t - da - u_t (db - da)``.
    """
    br = fit.knots
    a, b = br[0], br[-1]
    ia, ib = int(np.argmin(s2)), int(np.argmax(s2))
    t = full_knot_vector(br, fit.degree)
    m = fit.gamma.size
    xc = np.minimum(s2, np.nextafter(b, -np.inf))
    X = BSpline.design_matrix(xc, t, fit.degree).toarray()
    D = BSpline(t, np.eye(m), fit.degree).derivative()(xc)
    W = sens - sens[ia] - np.outer((s2 - a) / (b - a), sens[ib] - sens[ia])
    A = X.T @ X
    A[np.diag_indices_from(A)] += jitter
    g = fit.gamma
    r = y - X @ g
    out = np.empty((s2.size, 3))
    for k in range(3):
        dX = D * W[:, k][:, None]
        dg = solve_dense(A, dX.T @ r - X.T @ (dX @ g), name="spline normal equations")
        out[:, k] = dX @ g + X @ dg
    return out


def profile_score(theta, y, R_T: int, degree: int = DEFAULT_DEGREE) -> np.ndarray:
    """Gradient of the profiled negative quasi-likelihood ``-f(theta, lam_hat_theta)``.

    Same form as :func:`garchm_score` with ``lam_hat' dsigma^2/dtheta``
    replaced by the total derivative of the refitted value, so the
    coefficient and breakpoint motion are included.
    """
    y = np.asarray(y, dtype=float)
    s2, sens = sigma_recursion(theta, y)
    fit = fit_lambda_spline(s2, y, R_T, degree)
    resid = y - fit(s2)
    psi1 = 0.5 * ((1.0 / s2 - resid**2 / s2**2) @ sens)
    return psi1 - (resid / s2) @ fitted_value_sensitivity(s2, sens, y, fit)


def profiled_objective(theta, y, R_T: int, degree: int = DEFAULT_DEGREE) -> float:
    return -quasi_loglik(theta, y, refit(theta, y, R_T, degree))


@dataclass
class GarchSolveReport(SolveReport):
    fit: SplineFit = None
    extrapolation_warnings: int = 0


def _newton_direction(H, psi):
    """``H^-1 psi``; a shifted symmetric part replaces ``H`` when that is not a descent direction."""
    try:
        step = solve_dense(H, psi, name="score Jacobian")
        if psi @ step > 0:
            return step
    except SingularMatrixError:
        pass
    Hs = 0.5 * (H + H.T)
    ev = np.linalg.eigvalsh(Hs)
    shift = max(0.0, -ev[0]) + 1e-3 * max(abs(ev[-1]), 1e-12)
    return solve_dense(Hs + shift * np.eye(H.shape[0]), psi, name="shifted score Jacobian")


def _backtrack(theta, step, psi, objective, max_halvings):
    """Largest ``t = 2^-k`` with an admissible point satisfying the Armijo condition."""
    f0 = objective(theta)
    slope = float(psi @ step)
    t = 1.0
    for _ in range(max_halvings + 1):
        cand = theta - t * step
        if is_admissible(cand):
            try:
                fc = objective(cand)
            except SemiprofError:
                fc = np.inf
            if np.isfinite(fc) and fc <= f0 - 1e-4 * t * slope:
                return cand
        t *= 0.5
    return None


def garchm_solve(y, method: str, init, cfg: SolverConfig = None, R_T: int = None,
                 degree: int = DEFAULT_DEGREE, max_halvings: int = 30) -> GarchSolveReport:
    """Estimate ``theta`` by implicit profiling (``"ip"``) or backfitting (``"backfit"``).

    ``ip`` takes Newton steps on the profiled score, with the Jacobian from
    central differences of :func:`profile_score` (every evaluation refits
    the spline).  ``backfit`` refits the spline at the current iterate,
    freezes it and takes one Newton step on the frozen score.  Steps are
    backtracked on the matching objective (profiled or frozen negative
    quasi-likelihood) and must stay stationary.

    Convergence: ``max|psi| / T <= tol`` and ``max|dtheta| <= tol``, where
    ``psi`` is the method's own equation at the new iterate.
    """
    if method not in GARCHM_METHODS:
        raise ValueError(f"method must be one of {GARCHM_METHODS}")
    cfg = cfg or SolverConfig(tol=1e-6, max_iter=500)
    y = np.asarray(y, dtype=float)
    T = y.size
    R_T = n_knots(T) if R_T is None else R_T
    if not isinstance(init, GarchTheta):
        init = GarchTheta(*np.asarray(init, dtype=float))
    theta = init.as_array()
    t_start = time.perf_counter()
    trace = []
    warnings = 0
    converged = False
    fit = refit(theta, y, R_T, degree)
    psi = profile_score(theta, y, R_T, degree) if method == "ip" else garchm_score(theta, y, fit)
    for _ in range(cfg.max_iter):
        t0 = time.perf_counter()
        if method == "ip":
            def score(t):
                return profile_score(t, y, R_T, degree)

            def objective(t):
                return profiled_objective(t, y, R_T, degree)
        else:
            frozen = fit

            def score(t):
                return garchm_score(t, y, frozen)

            def objective(t):
                return -quasi_loglik(t, y, frozen)
        try:
            # the omega stencil must stay positive
            h = cfg.fd_step * np.maximum(1.0, np.abs(theta))
            h[0] = min(h[0], 0.5 * theta[0])
            H = fd_jacobian(score, theta, steps=h)
        except DomainError as exc:
            raise SemiprofError(f"{method}: iterate {theta} too close to the boundary") from exc
        cand = _backtrack(theta, _newton_direction(H, psi), psi, objective, max_halvings)
        if cand is None:
            raise ConvergenceError(
                f"{method}: no acceptable step after {max_halvings} halvings", best=theta.copy()
            )
        if method == "backfit":
            warnings += frozen.extrapolated
        dtheta = float(np.max(np.abs(cand - theta)))
        theta = cand
        fit = refit(theta, y, R_T, degree)
        psi = profile_score(theta, y, R_T, degree) if method == "ip" else garchm_score(theta, y, fit)
        if not np.all(np.isfinite(psi)):
            raise DivergenceError(f"{method}: non-finite score", state=theta)
        r = float(np.max(np.abs(psi))) / T
        trace.append(TraceRecord(theta.copy(), fit.gamma.copy(), r, 0.0, time.perf_counter() - t0))
        if r <= cfg.tol and dtheta <= cfg.tol:
            converged = True
            break
    return GarchSolveReport(
        final=ParameterState(theta, fit.gamma),
        converged=converged,
        iterations=len(trace),
        residual_psi=float(np.max(np.abs(psi))) / T,
        residual_phi=0.0,
        trace=trace,
        total_time=time.perf_counter() - t_start,
        method=method,
        fit=fit,
        extrapolation_warnings=warnings,
    )
