"""Temporally coupled Gaussian posterior over latent trajectories.

Each latent dimension q carries free parameters (mu_bar_q, lambda_q) that
reparameterize the posterior moments against the dynamical prior kernel
matrix K_t:

    mu_q = K_t mu_bar_q,     S_q = (K_t^{-1} + diag(lambda_q))^{-1}

All computations route through B = I + sqrt(L) K_t sqrt(L) (L = diag(lambda)),
which stays well-conditioned even when K_t is near-singular:

    S_q               = K_t - K_t C K_t,   C = sqrt(L) B^{-1} sqrt(L)
    KL(q_q || prior)  = 0.5 * (tr(B^{-1}) + mu_bar^T K_t mu_bar - N + log|B|)

so neither K_t nor S_q is ever inverted directly.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch
from .kernels import KernelSpec, eval_kernel, kernel_gradients, n_log_params
from .numerics import PsdFactor, chol_with_jitter, inv_psd, logdet_psd


@dataclass(frozen=True)
class DynamicalPrior:
    """Zero-mean GP prior over each latent dimension, indexed by time."""

    times: np.ndarray  # (N,), strictly increasing
    kernel: KernelSpec
    K_t: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        if times.size < 1:
            raise DimensionMismatch("prior needs at least one time point")
        if np.any(np.diff(times) <= 0):
            raise ValueError("times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(
            self, "K_t", eval_kernel(self.kernel, times[:, None], times[:, None])
        )

    @property
    def n_points(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class VariationalPosterior:
    """Free parameters per latent dimension; rows index dimensions."""

    mu_bar: np.ndarray  # (Q, N)
    lam: np.ndarray  # (Q, N), strictly positive (0 allowed as exact limit)

    def __post_init__(self):
        mu_bar = np.atleast_2d(np.asarray(self.mu_bar, dtype=float))
        lam = np.atleast_2d(np.asarray(self.lam, dtype=float))
        if mu_bar.shape != lam.shape:
            raise DimensionMismatch(
                f"mu_bar {mu_bar.shape} and lambda {lam.shape} differ"
            )
        if np.any(lam < 0):
            raise ValueError("lambda must be non-negative")
        object.__setattr__(self, "mu_bar", mu_bar)
        object.__setattr__(self, "lam", lam)

    @property
    def n_latent(self) -> int:
        return self.mu_bar.shape[0]

    @property
    def n_points(self) -> int:
        return self.mu_bar.shape[1]


@dataclass(frozen=True)
class DimMoments:
    """Derived quantities for one latent dimension, computed once per pass."""

    mu: np.ndarray  # (N,)
    S: np.ndarray  # (N, N)
    C: np.ndarray  # (N, N): sqrt(L) B^{-1} sqrt(L)
    B_factor: PsdFactor
    sqrt_lam: np.ndarray  # (N,)


def compute_dim_moments(
    prior: DynamicalPrior, mu_bar: np.ndarray, lam: np.ndarray
) -> DimMoments:
    mu_bar = np.asarray(mu_bar, dtype=float).ravel()
    lam = np.asarray(lam, dtype=float).ravel()
    K = prior.K_t
    if mu_bar.size != prior.n_points or lam.size != prior.n_points:
        raise DimensionMismatch("free-parameter length mismatch with prior times")
    sqrt_lam = np.sqrt(lam)
    B = np.eye(prior.n_points) + sqrt_lam[:, None] * K * sqrt_lam[None, :]
    factor = chol_with_jitter(B)
    Binv = inv_psd(factor)
    C = sqrt_lam[:, None] * Binv * sqrt_lam[None, :]
    KC = K @ C
    S = K - KC @ K
    S = 0.5 * (S + S.T)
    return DimMoments(mu=K @ mu_bar, S=S, C=C, B_factor=factor, sqrt_lam=sqrt_lam)


def reparam_to_moments(
    prior: DynamicalPrior, mu_bar: np.ndarray, lam: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior moments (mu, S) for one latent dimension."""
    dm = compute_dim_moments(prior, mu_bar, lam)
    return dm.mu, dm.S


def all_dim_moments(post: VariationalPosterior, prior: DynamicalPrior) -> list:
    return [
        compute_dim_moments(prior, post.mu_bar[q], post.lam[q])
        for q in range(post.n_latent)
    ]


def posterior_marginals(post: VariationalPosterior, prior: DynamicalPrior):
    """Per-point means (N, Q) and diagonal variances (N, Q)."""
    dims = all_dim_moments(post, prior)
    means = np.column_stack([d.mu for d in dims])
    variances = np.column_stack([np.maximum(np.diag(d.S), 0.0) for d in dims])
    return means, variances


def _kl_dim(prior: DynamicalPrior, mu_bar: np.ndarray, dm: DimMoments) -> float:
    Binv = inv_psd(dm.B_factor)
    quad = float(mu_bar @ dm.mu)  # mu_bar^T K_t mu_bar
    return 0.5 * (
        float(np.trace(Binv)) + quad - prior.n_points + logdet_psd(dm.B_factor)
    )


def kl_qp(post: VariationalPosterior, prior: DynamicalPrior) -> float:
    """KL(q(X) || prior), summed over latent dimensions; non-negative."""
    total = 0.0
    for q in range(post.n_latent):
        dm = compute_dim_moments(prior, post.mu_bar[q], post.lam[q])
        total += _kl_dim(prior, post.mu_bar[q], dm)
    return total


@dataclass(frozen=True)
class KlGradients:
    d_mu_bar: np.ndarray  # (Q, N)
    d_log_lambda: np.ndarray  # (Q, N)
    d_log_kernel: np.ndarray  # (n kernel log-params,)


def kl_gradients(post: VariationalPosterior, prior: DynamicalPrior) -> KlGradients:
    """Analytic gradients of the KL term.

    The kernel gradient is returned in the log-parameter order of the
    dynamical kernel (see :func:`vgpls.kernels.to_log_params`).
    """
    N = prior.n_points
    K = prior.K_t
    d_mu_bar = np.zeros_like(post.mu_bar)
    d_log_lam = np.zeros_like(post.lam)
    K_adjoint = np.zeros((N, N))

    for q in range(post.n_latent):
        dm = compute_dim_moments(prior, post.mu_bar[q], post.lam[q])
        Binv = inv_psd(dm.B_factor)
        G = 0.5 * (Binv - Binv @ Binv)
        G = 0.5 * (G + G.T)
        d_mu_bar[q] = dm.mu
        scaled = dm.sqrt_lam[:, None] * (G * K) * dm.sqrt_lam[None, :]
        d_log_lam[q] = scaled.sum(axis=1)
        K_adjoint += dm.sqrt_lam[:, None] * G * dm.sqrt_lam[None, :]
        K_adjoint += 0.5 * np.outer(post.mu_bar[q], post.mu_bar[q])

    t = prior.times[:, None]
    grads = kernel_gradients(prior.kernel, t, t)
    d_log_kernel = np.array([float(np.sum(K_adjoint * g)) for g in grads])
    return KlGradients(d_mu_bar, d_log_lam, d_log_kernel)


def moment_vjp(
    prior: DynamicalPrior,
    mu_bar: np.ndarray,
    dm: DimMoments,
    d_mean: np.ndarray,
    d_var: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Chain adjoints on (mu, diag(S)) back to one dimension's parameters.

    Given d_obj/d_mu and d_obj/d_diag(S) for a single latent dimension,
    returns (d_mu_bar, d_log_lambda, K_t adjoint). Uses

        d mu = dK mu_bar + K d mu_bar
        d S  = S K^{-1} dK K^{-1} S - S dLambda S

    with K^{-1} S = I - C K evaluated without inverting K_t.
    """
    K = prior.K_t
    d_mean = np.asarray(d_mean, dtype=float).ravel()
    d_var = np.asarray(d_var, dtype=float).ravel()

    d_mu_bar = K @ d_mean
    K_adjoint = np.outer(d_mean, np.asarray(mu_bar, dtype=float).ravel())

    E = np.eye(prior.n_points) - dm.C @ K  # K^{-1} S
    SWS = dm.S @ (d_var[:, None] * dm.S)  # S W S with W = diag(d_var)
    lam = dm.sqrt_lam**2
    d_log_lam = -lam * np.diag(SWS)
    K_adjoint += (E * d_var[None, :]) @ E.T  # E W E^T
    return d_mu_bar, d_log_lam, K_adjoint
