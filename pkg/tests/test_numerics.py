import numpy as np
import pytest
import scipy.linalg

from vgpls.errors import NonFiniteEvaluation, NotPositiveDefinite, NotSymmetric
from vgpls.numerics import (
    chol_with_jitter,
    finite_diff_grad,
    logdet_psd,
    solve_psd,
)

from helpers import random_psd


class TestCholWithJitter:
    def test_identity_needs_no_jitter(self):
        f = chol_with_jitter(np.eye(3), max_jitter=1e-4)
        assert f.jitter == 0.0
        np.testing.assert_allclose(f.lower, np.eye(3))

    def test_hand_solvable_2x2(self):
        A = np.array([[4.0, 2.0], [2.0, 3.0]])
        f = chol_with_jitter(A)
        assert f.jitter == 0.0
        expected = np.array([[2.0, 0.0], [1.0, np.sqrt(2.0)]])
        np.testing.assert_allclose(f.lower, expected, rtol=1e-12)

    def test_rank_deficient_forces_jitter(self):
        A = np.array([[1.0, 1.0], [1.0, 1.0]])
        f = chol_with_jitter(A)
        assert f.jitter > 0.0
        recon = f.lower @ f.lower.T
        np.testing.assert_allclose(recon, A + f.jitter * np.eye(2), atol=1e-12)

    def test_reconstruction_error_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            A = random_psd(rng, 6)
            f = chol_with_jitter(A)
            target = A + f.jitter * np.eye(6)
            err = np.linalg.norm(f.lower @ f.lower.T - target) / np.linalg.norm(A)
            assert err < 1e-10

    def test_asymmetric_rejected(self):
        A = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(NotSymmetric):
            chol_with_jitter(A)

    def test_ladder_exhaustion(self):
        A = np.array([[1.0, 0.0], [0.0, -5.0]])
        with pytest.raises(NotPositiveDefinite):
            chol_with_jitter(A)

    def test_solve_accuracy(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            A = random_psd(rng, 8)
            assert np.linalg.cond(A) < 1e6
            b = rng.standard_normal(8)
            x = solve_psd(chol_with_jitter(A), b)
            assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-8


class TestLogdet:
    @pytest.mark.parametrize("n", [1, 3, 7])
    def test_identity_is_zero(self, n):
        assert logdet_psd(chol_with_jitter(np.eye(n))) == pytest.approx(0.0, abs=1e-14)

    def test_diag_2x2(self):
        f = chol_with_jitter(np.diag([2.0, 2.0]))
        assert logdet_psd(f) == pytest.approx(2.0 * np.log(2.0), rel=1e-12)

    def test_against_lu_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            A = random_psd(rng, 5)
            # Independent oracle: sign-stable determinant via LU decomposition.
            _, L, U = scipy.linalg.lu(A)
            oracle = float(np.sum(np.log(np.abs(np.diag(U)))) + np.sum(np.log(np.abs(np.diag(L)))))
            val = logdet_psd(chol_with_jitter(A))
            assert val == pytest.approx(oracle, rel=1e-8)


class TestFiniteDiff:
    def test_quadratic_scalar(self):
        g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-6)

    def test_quadratic_vector(self):
        g = finite_diff_grad(lambda x: float(x @ x), np.array([1.0, 2.0]), h=1e-5)
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-6)

    def test_nonfinite_probe_raises(self):
        with np.errstate(all="ignore"), pytest.raises(NonFiniteEvaluation):
            finite_diff_grad(lambda x: float(np.log(x[0])), np.array([0.0]), h=1e-5)

    def test_h_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_grad(lambda x: 0.0, np.zeros(1), h=0.0)
