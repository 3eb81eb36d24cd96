import numpy as np
import pytest

from vgpls.errors import DimensionMismatch
from vgpls.kernels import (
    eval_kernel,
    eval_kernel_diag,
    from_log_params,
    kernel_gradients,
    periodic,
    rbf_ard,
    rbf_input_gradients,
    to_log_params,
    white_noise,
)

from helpers import assert_grad_close


def _random_spec(rng, family, q=2):
    if family == "rbf":
        return rbf_ard(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0, size=q))
    if family == "periodic":
        return periodic(rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(1.0, 3.0))
    return white_noise(rng.uniform(0.5, 2.0), input_dim=q)


class TestEval:
    def test_rbf_at_same_point(self):
        k = rbf_ard(1.0, [1.0])
        x = np.array([[0.7]])
        assert eval_kernel(k, x, x)[0, 0] == pytest.approx(1.0)

    def test_rbf_unit_distance(self):
        k = rbf_ard(1.0, [1.0])
        val = eval_kernel(k, np.array([[0.0]]), np.array([[1.0]]))[0, 0]
        assert val == pytest.approx(np.exp(-0.5), rel=1e-12)

    def test_periodic_exact_period(self):
        p = 1.7
        k = periodic(1.0, 0.8, p)
        val = eval_kernel(k, np.array([[0.3]]), np.array([[0.3 + p]]))[0, 0]
        assert val == pytest.approx(1.0, rel=1e-12)

    def test_white_noise_same_object_only(self):
        k = white_noise(0.1)
        X = np.arange(3.0)[:, None]
        np.testing.assert_allclose(eval_kernel(k, X, X), 0.1 * np.eye(3))
        np.testing.assert_allclose(eval_kernel(k, X, X.copy()), np.zeros((3, 3)))

    def test_dimension_mismatch(self):
        k = rbf_ard(1.0, [1.0, 1.0])
        with pytest.raises(DimensionMismatch):
            eval_kernel(k, np.zeros((3, 1)), np.zeros((3, 1)))


class TestDiag:
    def test_stationary_constant(self):
        k = rbf_ard(2.5, [1.0])
        X = np.linspace(0, 1, 4)[:, None]
        np.testing.assert_allclose(eval_kernel_diag(k, X), 2.5)

    def test_white_noise_diag(self):
        k = white_noise(0.1)
        np.testing.assert_allclose(eval_kernel_diag(k, np.zeros((3, 1))), 0.1)

    @pytest.mark.parametrize("family", ["rbf", "periodic"])
    def test_matches_full_matrix(self, family):
        rng = np.random.default_rng(3)
        q = 1 if family == "periodic" else 2
        k = _random_spec(rng, family, q)
        X = rng.standard_normal((5, q))
        np.testing.assert_allclose(
            eval_kernel_diag(k, X), np.diag(eval_kernel(k, X, X)), atol=1e-14
        )


class TestProperties:
    @pytest.mark.parametrize("seed", range(10))
    def test_symmetry_and_psd(self, seed):
        rng = np.random.default_rng(seed)
        for family in ("rbf", "periodic"):
            q = 1 if family == "periodic" else 3
            k = _random_spec(rng, family, q)
            X = rng.standard_normal((8, q))
            K = eval_kernel(k, X, X)
            assert np.max(np.abs(K - K.T)) < 1e-12
            np.linalg.cholesky(K + 1e-8 * np.eye(8))

    def test_stationarity_under_shift(self):
        # Inputs and shift on a dyadic grid so the shifted coordinates are
        # exactly representable; the kernels depend only on differences.
        rng = np.random.default_rng(7)
        k = rbf_ard(1.3, [0.7, 1.4])
        X1 = rng.integers(-8, 8, size=(4, 2)) / 4.0
        X2 = rng.integers(-8, 8, size=(5, 2)) / 4.0
        shift = np.array([3.0, -2.5])
        np.testing.assert_array_equal(
            eval_kernel(k, X1, X2), eval_kernel(k, X1 + shift, X2 + shift)
        )
        kp = periodic(1.0, 0.9, 2.0)
        T1 = rng.integers(-8, 8, size=(4, 1)) / 4.0
        T2 = rng.integers(-8, 8, size=(5, 1)) / 4.0
        np.testing.assert_array_equal(
            eval_kernel(kp, T1, T2), eval_kernel(kp, T1 + 2.0, T2 + 2.0)
        )


class TestGradients:
    def test_variance_gradient_is_kernel(self):
        rng = np.random.default_rng(11)
        for family in ("rbf", "periodic", "white"):
            q = 1 if family != "rbf" else 2
            k = _random_spec(rng, family, q)
            X = rng.standard_normal((4, q))
            K = eval_kernel(k, X, X)
            np.testing.assert_allclose(kernel_gradients(k, X, X)[0], K)

    def test_rbf_lengthscale_gradient_zero_at_same_point(self):
        k = rbf_ard(1.0, [0.8])
        x = np.array([[0.4]])
        grads = kernel_gradients(k, x, x)
        assert grads[1][0, 0] == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        family = ("rbf", "periodic")[seed % 2]
        q = 1 if family == "periodic" else 2
        k = _random_spec(rng, family, q)
        X1 = rng.standard_normal((3, q))
        X2 = rng.standard_normal((4, q))
        W = rng.standard_normal((3, 4))  # random contraction weights
        theta0 = to_log_params(k)
        grads = kernel_gradients(k, X1, X2)
        analytic = np.array([float(np.sum(W * g)) for g in grads])

        def f(theta):
            return float(np.sum(W * eval_kernel(from_log_params(k, theta), X1, X2)))

        assert_grad_close(f, theta0, analytic, rtol=1e-4)

    @pytest.mark.parametrize("seed", range(10))
    def test_input_gradients(self, seed):
        rng = np.random.default_rng(200 + seed)
        k = _random_spec(rng, "rbf", 2)
        X1 = rng.standard_normal((3, 2))
        X2 = rng.standard_normal((4, 2))
        W = rng.standard_normal((3, 4))
        analytic = rbf_input_gradients(k, X1, X2, W).ravel()

        def f(flat):
            return float(np.sum(W * eval_kernel(k, flat.reshape(3, 2), X2)))

        assert_grad_close(f, X1.ravel(), analytic, rtol=1e-4)


class TestLogParamRoundTrip:
    def test_round_trip(self):
        for k in (rbf_ard(1.5, [0.5, 2.0]), periodic(0.7, 1.1, 2.3), white_noise(0.2)):
            k2 = from_log_params(k, to_log_params(k))
            assert k2 == k
