import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semiprof.errors import SingularMatrixError
from semiprof.linalg import QuadraticProblem, fd_jacobian, random_quadratic, schur_F, solve_dense
from semiprof.solver import ParameterState, implicit_gradient, ip_hessian, newton_step


class TestSolveDense:
    def test_identity(self):
        b = np.array([1.5, -2.0, 3.0])
        np.testing.assert_array_equal(solve_dense(np.eye(3), b), b)

    def test_zero_rhs(self):
        np.testing.assert_array_equal(solve_dense(np.array([[2.0, 1.6], [1.6, 2.0]]), np.zeros(2)), np.zeros(2))

    def test_random_residual(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((8, 8)) + 8 * np.eye(8)
        b = rng.standard_normal(8)
        x = solve_dense(A, b)
        assert np.max(np.abs(A @ x - b)) <= 1e-10 * (1 + np.max(np.abs(b)))

    def test_matrix_rhs(self):
        rng = np.random.default_rng(4)
        A = rng.standard_normal((5, 5)) + 5 * np.eye(5)
        B = rng.standard_normal((5, 3))
        np.testing.assert_allclose(A @ solve_dense(A, B), B, atol=1e-12)

    def test_singular(self):
        with pytest.raises(SingularMatrixError, match="H22"):
            solve_dense(np.array([[1.0, 2.0], [2.0, 4.0]]), np.ones(2), name="H22")

    def test_zero_matrix(self):
        with pytest.raises(SingularMatrixError):
            solve_dense(np.zeros((2, 2)), np.ones(2))

    def test_nonsquare(self):
        with pytest.raises(ValueError):
            solve_dense(np.ones((2, 3)), np.ones(2))


class TestFdJacobian:
    def test_linear_exact(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        np.testing.assert_allclose(fd_jacobian(lambda x: A @ x + b, rng.standard_normal(3)), A, atol=1e-8)

    def test_toy_gradient(self):
        a = 1.6
        grad = lambda v: np.array([2 * v[0] + a * v[1], 2 * v[1] + a * v[0]])
        np.testing.assert_allclose(fd_jacobian(grad, np.array([1.0, 1.0])), [[2, a], [a, 2]], atol=1e-8)

    def test_square(self):
        J = fd_jacobian(lambda x: x**2, np.array([3.0]), step=1e-4)
        assert abs(J[0, 0] - 6.0) < 1e-7

    def test_relative_step(self):
        # h = step * |x| for |x| > 1: cubic error term scales with h^2
        J = fd_jacobian(lambda x: x**3, np.array([100.0]), step=1e-6)
        np.testing.assert_allclose(J[0, 0], 3e4, rtol=1e-8)

    def test_nonfinite(self):
        with pytest.raises(FloatingPointError):
            fd_jacobian(lambda x: np.log(x), np.array([0.0]))


class TestRandomQuadratic:
    def test_deterministic(self):
        a, b = random_quadratic(3, 4, seed=11), random_quadratic(3, 4, seed=11)
        np.testing.assert_array_equal(a.H, b.H)
        np.testing.assert_array_equal(a.g, b.g)

    def test_spd_and_conditioning(self):
        qp = random_quadratic(5, 15, cond_max=1e3, seed=2)
        H = qp.H
        np.testing.assert_allclose(H, H.T, atol=1e-12)
        np.linalg.cholesky(H)
        ev = np.linalg.eigvalsh(H)
        assert ev.min() >= 1 - 1e-9 and ev.max() <= 1e3 * (1 + 1e-9)

    def test_spherical(self):
        qp = random_quadratic(1, 1, cond_max=1.0, seed=0)
        np.testing.assert_allclose(qp.H, np.eye(2), atol=1e-12)

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            random_quadratic(0, 2)
        with pytest.raises(ValueError):
            random_quadratic(2, 2, cond_max=0.5)

    def test_system_blocks_match_fd(self):
        qp = random_quadratic(3, 6, seed=5)
        s = qp.system()
        rng = np.random.default_rng(1)
        th, la = rng.standard_normal(3), rng.standard_normal(6)
        np.testing.assert_allclose(fd_jacobian(lambda t: s.eval_psi(t, la), th, 1e-5), qp.H11, atol=1e-6)
        np.testing.assert_allclose(fd_jacobian(lambda l: s.eval_psi(th, l), la, 1e-5), qp.H12, atol=1e-6)
        np.testing.assert_allclose(fd_jacobian(lambda t: s.eval_phi(t, la), th, 1e-5), qp.H21, atol=1e-6)
        np.testing.assert_allclose(fd_jacobian(lambda l: s.eval_phi(th, l), la, 1e-5), qp.H22, atol=1e-6)


def _toy_qp(alpha):
    one = np.ones(1)
    return QuadraticProblem(g1=0 * one, g2=0 * one, H11=2 * np.eye(1), H12=alpha * np.eye(1),
                            H21=alpha * np.eye(1), H22=2 * np.eye(1))


class TestSchur:
    @pytest.mark.parametrize("alpha", [0.0, 0.8, 1.6, -1.9])
    def test_toy_coefficient(self, alpha):
        np.testing.assert_allclose(schur_F(_toy_qp(alpha)), [[2 / (4 - alpha**2)]], rtol=1e-14)

    def test_decoupled(self):
        qp = random_quadratic(3, 4, seed=9)
        qp0 = QuadraticProblem(qp.g1, qp.g2, qp.H11, 0 * qp.H12, 0 * qp.H21, qp.H22)
        np.testing.assert_allclose(schur_F(qp0), np.linalg.inv(qp.H11), atol=1e-12)

    def test_singular_h22(self):
        qp = random_quadratic(2, 2, seed=1)
        bad = QuadraticProblem(qp.g1, qp.g2, qp.H11, qp.H12, qp.H21, np.zeros((2, 2)))
        with pytest.raises(SingularMatrixError):
            schur_F(bad)

    @settings(max_examples=40, deadline=None)
    @given(p=st.integers(1, 5), q=st.integers(1, 20), seed=st.integers(0, 2**31 - 1))
    def test_ip_hessian_is_inverse_F(self, p, q, seed):
        qp = random_quadratic(p, q, seed=seed)
        s = qp.system()
        st_ = ParameterState(np.zeros(p), np.zeros(q))
        H = ip_hessian(s, st_, implicit_gradient(s, st_))
        np.testing.assert_allclose(H, np.linalg.inv(schur_F(qp)), atol=1e-10 * np.abs(H).max())

    @settings(max_examples=40, deadline=None)
    @given(p=st.integers(1, 5), q=st.integers(1, 20), seed=st.integers(0, 2**31 - 1))
    def test_block_inverse_newton_step(self, p, q, seed):
        qp = random_quadratic(p, q, seed=seed)
        rng = np.random.default_rng(seed)
        beta = rng.standard_normal(p + q)
        G = qp.g + qp.H @ beta
        F = schur_F(qp)
        H22i = np.linalg.inv(qp.H22)
        d_theta = F @ (G[:p] - qp.H12 @ H22i @ G[p:])
        d_lam = H22i @ (G[p:] - qp.H21 @ d_theta)
        block = beta - np.concatenate([d_theta, d_lam])
        full = newton_step(qp.system(), ParameterState(beta[:p], beta[p:])).beta
        np.testing.assert_allclose(full, block, atol=1e-9)
