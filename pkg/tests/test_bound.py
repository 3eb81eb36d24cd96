import numpy as np
import pytest

from vgpls.bound import (
    BoundValue,
    InducingSet,
    bound_gradients,
    collapsed_bound,
    data_term,
)
from vgpls.kernels import eval_kernel, from_log_params, rbf_ard, to_log_params
from vgpls.variational import DynamicalPrior, VariationalPosterior, kl_qp

from helpers import assert_grad_close


def _setup(seed=0, n=6, d=2, q=1, m=3, lengthscale=0.3):
    rng = np.random.default_rng(seed)
    times = np.linspace(0.0, 1.0, n) + 0.01 * rng.uniform(size=n)
    times.sort()
    prior = DynamicalPrior(times=times, kernel=rbf_ard(1.0, [lengthscale]))
    post = VariationalPosterior(
        mu_bar=rng.standard_normal((q, n)), lam=rng.uniform(0.3, 2.0, size=(q, n))
    )
    k_f = rbf_ard(rng.uniform(0.8, 1.5), rng.uniform(0.6, 1.6, size=q))
    Z = rng.standard_normal((m, q))
    Y = rng.standard_normal((n, d))
    beta = rng.uniform(1.0, 4.0)
    return rng, prior, post, k_f, InducingSet(Z), Y, beta


def _dense_gp_logpdf(y, K, beta):
    """Exact log N(y | 0, K + (1/beta) I)."""
    n = y.size
    C = K + np.eye(n) / beta
    L = np.linalg.cholesky(C)
    alpha = np.linalg.solve(L.T, np.linalg.solve(L, y))
    return float(
        -0.5 * n * np.log(2 * np.pi) - np.sum(np.log(np.diag(L))) - 0.5 * y @ alpha
    )


class TestValue:
    def test_total_decomposition(self):
        _, prior, post, k_f, Z, Y, beta = _setup()
        bv = collapsed_bound(Y, post, prior, Z, k_f, beta)
        assert bv.total == pytest.approx(bv.data_term - bv.kl_term, rel=1e-14)
        assert bv.data_term == pytest.approx(float(np.sum(bv.per_dimension)), rel=1e-14)
        assert bv.kl_term >= -1e-8

    def test_duplicated_dimension_adds_equal_term(self):
        _, prior, post, k_f, Z, Y, beta = _setup(d=2)
        Y3 = np.column_stack([Y, Y[:, 1]])
        bv = collapsed_bound(Y3, post, prior, Z, k_f, beta)
        assert bv.per_dimension[2] == pytest.approx(bv.per_dimension[1], rel=1e-14)

    def test_dimension_permutation_invariance(self):
        rng, prior, post, k_f, Z, Y, beta = _setup(d=4)
        perm = rng.permutation(4)
        a = collapsed_bound(Y, post, prior, Z, k_f, beta)
        b = collapsed_bound(Y[:, perm], post, prior, Z, k_f, beta)
        assert a.data_term == pytest.approx(b.data_term, rel=1e-12)
        np.testing.assert_allclose(a.per_dimension[perm], b.per_dimension, rtol=1e-12)

    def test_degenerate_limit_matches_dense_gp(self):
        # S -> 0, M = N, inducing at the posterior means: the data term
        # becomes the exact dense GP marginal likelihood per dimension.
        rng = np.random.default_rng(7)
        n, d = 5, 2
        times = np.linspace(0, 1, n)
        prior = DynamicalPrior(times=times, kernel=rbf_ard(1.0, [0.4]))
        mu_bar = rng.standard_normal((1, n))
        post = VariationalPosterior(mu_bar, np.zeros((1, n)))  # lam=0 -> S=K_t
        # Rebuild with S forced to ~0 by huge lambda.
        post = VariationalPosterior(mu_bar, 1e14 * np.ones((1, n)))
        k_f = rbf_ard(1.3, [0.9])
        beta = 3.0
        means = (prior.K_t @ mu_bar[0])[:, None]
        Y = rng.standard_normal((n, d))
        per_dim = data_term(Y, post, prior, InducingSet(means), k_f, beta)
        K_nn = eval_kernel(k_f, means, means)
        for j in range(d):
            oracle = _dense_gp_logpdf(Y[:, j], K_nn, beta)
            assert per_dim[j] == pytest.approx(oracle, rel=1e-4)

    def test_bound_below_importance_sampled_evidence(self):
        # N=4, D=2, Q=1: estimate log p(Y | t) by sampling latents from the
        # dynamical prior and check total <= estimate + 3 SE.
        rng = np.random.default_rng(11)
        n, d = 4, 2
        times = np.linspace(0, 1, n)
        prior = DynamicalPrior(times=times, kernel=rbf_ard(1.0, [0.4]))
        k_f = rbf_ard(1.2, [0.8])
        beta = 2.0

        # Data drawn from the generative model itself, moderate values.
        Lp = np.linalg.cholesky(prior.K_t + 1e-12 * np.eye(n))
        x_true = Lp @ rng.standard_normal(n)
        K_true = eval_kernel(k_f, x_true[:, None], x_true[:, None])
        Ly = np.linalg.cholesky(K_true + np.eye(n) / beta)
        Y = np.column_stack([Ly @ rng.standard_normal(n) for _ in range(d)])

        post = VariationalPosterior(
            rng.standard_normal((1, n)), rng.uniform(0.5, 2.0, size=(1, n))
        )
        bv = collapsed_bound(Y, post, prior, InducingSet(x_true[:, None] * 0.9), k_f, beta)

        n_samp = 1_000_000
        chunk = 100_000
        logws = []
        for start in range(0, n_samp, chunk):
            c = min(chunk, n_samp - start)
            X = (Lp @ rng.standard_normal((n, c))).T  # (c, n) prior samples
            diff = X[:, :, None] - X[:, None, :]
            w = 1.0 / k_f.lengthscales[0] ** 2
            Ks = k_f.variance * np.exp(-0.5 * w * diff**2) + np.eye(n)[None] / beta
            Ls = np.linalg.cholesky(Ks)
            logdets = 2.0 * np.sum(np.log(np.diagonal(Ls, axis1=1, axis2=2)), axis=1)
            sol = np.linalg.solve(Ls, np.broadcast_to(Y.T[None], (c, d, n)).transpose(0, 2, 1))
            quads = np.sum(sol**2, axis=(1, 2))
            logws.append(-0.5 * d * (n * np.log(2 * np.pi) + logdets) - 0.5 * quads)
        logw = np.concatenate(logws)
        m = np.max(logw)
        weights = np.exp(logw - m)
        est = m + np.log(np.mean(weights))
        se_mean = np.std(weights, ddof=1) / np.sqrt(n_samp)
        se_log = se_mean / np.mean(weights)  # delta method
        assert bv.total <= est + 3.0 * se_log


class TestGradients:
    def test_kl_independent_of_inducing(self):
        _, prior, post, k_f, Z, Y, beta = _setup()
        base = kl_qp(post, prior)
        # KL has no inducing dependence by construction; the bound gradient
        # w.r.t. Z must equal the data-term-only gradient.
        Z2 = InducingSet(Z.Z + 0.37)
        assert kl_qp(post, prior) == base

    @pytest.mark.parametrize("seed", range(20))
    def test_all_blocks_match_finite_differences(self, seed):
        rng, prior, post, k_f, Z, Y, beta = _setup(seed=seed, n=6, d=2, q=2, m=3)
        g = bound_gradients(Y, post, prior, Z, k_f, beta)

        def total(post_=None, prior_=None, Z_=None, kf_=None, beta_=None):
            return collapsed_bound(
                Y,
                post_ if post_ is not None else post,
                prior_ if prior_ is not None else prior,
                Z_ if Z_ is not None else Z,
                kf_ if kf_ is not None else k_f,
                beta_ if beta_ is not None else beta,
            ).total

        assert_grad_close(
            lambda v: total(post_=VariationalPosterior(v.reshape(post.mu_bar.shape), post.lam)),
            post.mu_bar.ravel(),
            g.d_mu_bar.ravel(),
        )
        assert_grad_close(
            lambda v: total(post_=VariationalPosterior(post.mu_bar, np.exp(v).reshape(post.lam.shape))),
            np.log(post.lam).ravel(),
            g.d_log_lambda.ravel(),
        )
        assert_grad_close(
            lambda v: total(Z_=InducingSet(v.reshape(Z.Z.shape))),
            Z.Z.ravel(),
            g.d_Z.ravel(),
        )
        assert_grad_close(
            lambda v: total(kf_=from_log_params(k_f, v)),
            to_log_params(k_f),
            g.d_log_kf,
        )
        assert_grad_close(
            lambda v: total(prior_=DynamicalPrior(prior.times, from_log_params(prior.kernel, v))),
            to_log_params(prior.kernel),
            g.d_log_kx,
        )
        assert_grad_close(
            lambda v: total(beta_=float(np.exp(v[0]))),
            np.array([np.log(beta)]),
            np.array([g.d_log_beta]),
        )
