"""Collapsed variational lower bound with inducing points, and its gradients.

The data term for one output dimension d, after the inducing-variable
distribution is optimized out analytically, is

    F_d = -N/2 log(2 pi) + N/2 log beta
          + 1/2 log|K_MM| - 1/2 log|K_MM + beta psi2|
          - beta/2 y_d^T y_d
          + beta^2/2 (psi1^T y_d)^T (K_MM + beta psi2)^{-1} (psi1^T y_d)
          - beta/2 (psi0 - tr(K_MM^{-1} psi2))

which depends on the latent posterior only through the psi statistics. The
full bound subtracts the KL divergence against the dynamical prior. All
solves are whitened through the Cholesky factor of K_MM so the expression
stays finite for ill-conditioned inducing kernels.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import DimensionMismatch
from .kernels import (
    KernelSpec,
    eval_kernel,
    kernel_gradients,
    n_log_params,
    rbf_input_gradients,
)
from .numerics import chol_with_jitter
from .psi_stats import GaussianMarginals, psi_gradients, psi_statistics, psi2_terms
from .variational import (
    DynamicalPrior,
    VariationalPosterior,
    all_dim_moments,
    kl_gradients,
    kl_qp,
    moment_vjp,
)


@dataclass(frozen=True)
class InducingSet:
    """Latent-space inducing locations."""

    Z: np.ndarray  # (M, Q)

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        if not np.all(np.isfinite(Z)):
            raise ValueError("inducing locations must be finite")
        object.__setattr__(self, "Z", Z)

    @property
    def count(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class BoundValue:
    total: float
    data_term: float
    kl_term: float
    per_dimension: np.ndarray  # (D,)


@dataclass(frozen=True)
class BoundGradients:
    d_mu_bar: np.ndarray  # (Q, N)
    d_log_lambda: np.ndarray  # (Q, N)
    d_Z: np.ndarray  # (M, Q)
    d_log_kf: np.ndarray  # mapping-kernel log-params
    d_log_kx: np.ndarray  # dynamical-kernel log-params
    d_log_beta: float


class _DataTermWork:
    """Shared factorizations for the data term at one parameter setting."""

    def __init__(self, Y, marginals, Z, k_f, beta):
        Y = np.asarray(Y, dtype=float)
        if Y.ndim != 2 or Y.shape[0] != marginals.n_points:
            raise DimensionMismatch(f"Y shape {Y.shape} inconsistent with posterior")
        self.Y = Y
        self.N, self.D = Y.shape
        self.beta = float(beta)
        self.k_f = k_f
        self.Z = Z
        self.stats = psi_statistics(marginals, k_f, Z)
        self.K_factor = chol_with_jitter(eval_kernel(k_f, Z, Z))
        L = self.K_factor.lower
        # Whitened psi2: C = L^{-1} psi2 L^{-T}
        half = solve_triangular(L, self.stats.psi2, lower=True)
        self.C = solve_triangular(L, half.T, lower=True).T
        self.C = 0.5 * (self.C + self.C.T)
        M = Z.shape[0]
        self.B = np.eye(M) + self.beta * self.C
        self.B_factor = chol_with_jitter(self.B)
        self.trace_term = self.stats.psi0 - float(np.trace(self.C))
        # b_d = psi1^T y_d for all dimensions at once: (M, D)
        self.Bmat = self.stats.psi1.T @ Y
        self.c = solve_triangular(L, self.Bmat, lower=True)  # L^{-1} b
        self.w = solve_triangular(self.B_factor.lower, self.c, lower=True)

    def per_dimension(self) -> np.ndarray:
        half_logdet_B = float(np.sum(np.log(np.diag(self.B_factor.lower))))
        const = (
            -0.5 * self.N * np.log(2.0 * np.pi)
            + 0.5 * self.N * np.log(self.beta)
            - half_logdet_B
            - 0.5 * self.beta * self.trace_term
        )
        yy = np.sum(self.Y**2, axis=0)
        quad = np.sum(self.w**2, axis=0)
        return const - 0.5 * self.beta * yy + 0.5 * self.beta**2 * quad

    def ginv_b(self) -> np.ndarray:
        """(K_MM + beta psi2)^{-1} psi1^T Y, shape (M, D)."""
        L = self.K_factor.lower
        inner = solve_triangular(self.B_factor.lower.T, self.w, lower=False)
        return solve_triangular(L.T, inner, lower=False)

    def ginv(self) -> np.ndarray:
        """(K_MM + beta psi2)^{-1}, explicit (M, M)."""
        L = self.K_factor.lower
        M = L.shape[0]
        Linv = solve_triangular(L, np.eye(M), lower=True)
        mid = cho_solve((self.B_factor.lower, True), Linv)
        return Linv.T @ mid

    def kmm_inv(self) -> np.ndarray:
        M = self.K_factor.lower.shape[0]
        return cho_solve((self.K_factor.lower, True), np.eye(M))


def data_term(
    Y: np.ndarray,
    post: VariationalPosterior,
    prior: DynamicalPrior,
    inducing: InducingSet,
    k_f: KernelSpec,
    beta: float,
) -> np.ndarray:
    """Per-dimension collapsed data terms over a fully populated Y."""
    dims = all_dim_moments(post, prior)
    marginals = GaussianMarginals(
        np.column_stack([d.mu for d in dims]),
        np.column_stack([np.maximum(np.diag(d.S), 0.0) for d in dims]),
    )
    work = _DataTermWork(Y, marginals, inducing.Z, k_f, beta)
    return work.per_dimension()


def collapsed_bound(
    Y: np.ndarray,
    post: VariationalPosterior,
    prior: DynamicalPrior,
    inducing: InducingSet,
    k_f: KernelSpec,
    beta: float,
) -> BoundValue:
    """Lower bound on log p(Y | times): data term minus dynamical KL."""
    per_dim = data_term(Y, post, prior, inducing, k_f, beta)
    kl = kl_qp(post, prior)
    data = float(np.sum(per_dim))
    return BoundValue(total=data - kl, data_term=data, kl_term=kl, per_dimension=per_dim)


def bound_gradients(
    Y: np.ndarray,
    post: VariationalPosterior,
    prior: DynamicalPrior,
    inducing: InducingSet,
    k_f: KernelSpec,
    beta: float,
) -> BoundGradients:
    """Analytic gradients of the total bound for every parameter block."""
    dims = all_dim_moments(post, prior)
    marginals = GaussianMarginals(
        np.column_stack([d.mu for d in dims]),
        np.column_stack([np.maximum(np.diag(d.S), 0.0) for d in dims]),
    )
    Z = inducing.Z
    work = _DataTermWork(Y, marginals, Z, k_f, beta)
    N, D = work.N, work.D
    b = float(beta)
    stats = work.stats

    Ginv = work.ginv()
    GinvB = work.ginv_b()  # (M, D)
    Kinv = work.kmm_inv()
    KinvPsi2Kinv = Kinv @ stats.psi2 @ Kinv

    # Adjoints of the data term w.r.t. the psi statistics and K_MM.
    d_psi0 = -0.5 * b * D
    d_psi1 = b**2 * (Y @ GinvB.T)  # (N, M)
    outer = GinvB @ GinvB.T  # sum_d (G^{-1} b_d)(G^{-1} b_d)^T
    d_psi2 = 0.5 * D * b * (Kinv - Ginv) - 0.5 * b**3 * outer
    d_kmm = (
        0.5 * D * (Kinv - Ginv)
        - 0.5 * b**2 * outer
        - 0.5 * D * b * KinvPsi2Kinv
    )

    # log-beta gradient of the data term.
    quad = np.sum(work.w**2, axis=0)  # b_d^T G^{-1} b_d
    psi2_gb = stats.psi2 @ GinvB
    d_beta = (
        D * (0.5 * N / b - 0.5 * float(np.trace(Ginv @ stats.psi2)))
        - 0.5 * float(np.sum(Y**2))
        + b * float(np.sum(quad))
        - 0.5 * b**2 * float(np.sum(GinvB * psi2_gb))
        - 0.5 * D * work.trace_term
    )
    d_log_beta = b * d_beta

    # Chain through the psi statistics.
    pg = psi_gradients(marginals, k_f, Z, w0=d_psi0, W1=d_psi1, W2=d_psi2)
    d_Z = pg.d_inducing.copy()
    d_log_kf = pg.d_log_hyperparams.copy()

    # K_MM contributions to mapping-kernel parameters and inducing locations.
    for i, g in enumerate(kernel_gradients(k_f, Z, Z)):
        d_log_kf[i] += float(np.sum(d_kmm * g))
    d_Z += rbf_input_gradients(k_f, Z, Z, d_kmm)
    d_Z += rbf_input_gradients(k_f, Z, Z, d_kmm.T)

    # Chain posterior-moment adjoints back to free parameters and K_t.
    Q = post.n_latent
    d_mu_bar = np.zeros_like(post.mu_bar)
    d_log_lambda = np.zeros_like(post.lam)
    Kt_adjoint = np.zeros_like(prior.K_t)
    for q in range(Q):
        dmb, dll, kadj = moment_vjp(
            prior, post.mu_bar[q], dims[q], pg.d_means[:, q], pg.d_variances[:, q]
        )
        d_mu_bar[q] = dmb
        d_log_lambda[q] = dll
        Kt_adjoint += kadj
    t = prior.times[:, None]
    kx_grads = kernel_gradients(prior.kernel, t, t)
    d_log_kx = np.array([float(np.sum(Kt_adjoint * g)) for g in kx_grads])

    # Subtract the KL gradients (total = data - KL).
    klg = kl_gradients(post, prior)
    d_mu_bar -= klg.d_mu_bar
    d_log_lambda -= klg.d_log_lambda
    d_log_kx -= klg.d_log_kernel

    return BoundGradients(
        d_mu_bar=d_mu_bar,
        d_log_lambda=d_log_lambda,
        d_Z=d_Z,
        d_log_kf=d_log_kf,
        d_log_kx=d_log_kx,
        d_log_beta=d_log_beta,
    )


@dataclass(frozen=True)
class MappingPosterior:
    """Projection of the trained mapping onto new latent Gaussians.

    Wraps the quantities needed to push an uncertain latent input through
    the sparse mapping: the inducing kernel factor, the collapsed posterior
    weights w = beta (K_MM + beta psi2)^{-1} psi1^T Y, and the variance
    correction A = K_MM^{-1} - (K_MM + beta psi2)^{-1}.
    """

    Z: np.ndarray
    k_f: KernelSpec
    beta: float
    weights: np.ndarray  # (M, D)
    var_correction: np.ndarray  # (M, M)


def fit_mapping_posterior(
    Y: np.ndarray,
    post: VariationalPosterior,
    prior: DynamicalPrior,
    inducing: InducingSet,
    k_f: KernelSpec,
    beta: float,
) -> MappingPosterior:
    dims = all_dim_moments(post, prior)
    marginals = GaussianMarginals(
        np.column_stack([d.mu for d in dims]),
        np.column_stack([np.maximum(np.diag(d.S), 0.0) for d in dims]),
    )
    work = _DataTermWork(Y, marginals, inducing.Z, k_f, beta)
    weights = beta * work.ginv_b()
    var_correction = work.kmm_inv() - work.ginv()
    return MappingPosterior(
        Z=inducing.Z,
        k_f=k_f,
        beta=float(beta),
        weights=weights,
        var_correction=0.5 * (var_correction + var_correction.T),
    )


def predict_outputs(
    mp: MappingPosterior, means_star: np.ndarray, vars_star: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of the noiseless outputs at new latents.

    ``means_star``/``vars_star`` are (n, Q) marginals of the latent
    predictive. Returns (n, D) arrays; observation noise is not included.
    """
    q_star = GaussianMarginals(means_star, np.maximum(vars_star, 0.0))
    stats1 = psi_statistics(q_star, mp.k_f, mp.Z)
    T = psi2_terms(q_star, mp.k_f, mp.Z)  # (n, M, M)
    mean = stats1.psi1 @ mp.weights  # (n, D)
    trace_part = np.einsum("ij,nij->n", mp.var_correction, T)
    quad = np.einsum("md,nmk,kd->nd", mp.weights, T, mp.weights)
    var = mp.k_f.variance - trace_part[:, None] + quad - mean**2
    return mean, np.maximum(var, 1e-12)
