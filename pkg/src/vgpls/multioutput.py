"""Multi-output GP samplers over scattered (time, dimension) observations.

Two constructions of the imputation distribution for unseen entries, both
driven by the shared dynamical kernel over time:

* linear coregionalization: cov[(t, d), (t', d')] = K_f[d, d'] * k_t(t, t')
  with K_f = phi phi^T, plus per-task diagonal noise. Assembled only over
  the observed/queried coordinates (heterotopic), never as a full Kronecker
  product.

* sparse process convolution: each output is a Gaussian-smoothed copy of
  one latent function u with RBF covariance; u is summarized at inducing
  times so training costs O(n_obs * M_u^2). The Gaussian-by-Gaussian
  convolutions have closed forms, and the smoothing-width -> 0 limit
  recovers the rank-one coregionalization model.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import (
    DimensionMismatch,
    EmptyObservations,
    NotPositiveDefinite,
    UnsupportedKernel,
)
from .kernels import KernelFamily, KernelSpec, eval_kernel, kernel_gradients
from .numerics import chol_with_jitter, solve_lower, solve_psd


@dataclass(frozen=True)
class ObservationSet:
    """Scattered observed entries of an N x D matrix, one row per entry."""

    times: np.ndarray  # (n,)
    dims: np.ndarray  # (n,) integer task indices
    values: np.ndarray  # (n,)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).ravel()
        dims = np.asarray(self.dims, dtype=int).ravel()
        values = np.asarray(self.values, dtype=float).ravel()
        if not (times.size == dims.size == values.size):
            raise DimensionMismatch("times, dims, values must have equal length")
        if times.size == 0:
            raise EmptyObservations("observation set is empty")
        pairs = np.stack([times, dims.astype(float)], axis=1)
        if np.unique(pairs, axis=0).shape[0] != times.size:
            raise ValueError("duplicate (time, dim) observation")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "values", values)

    @property
    def count(self) -> int:
        return self.times.size


@dataclass(frozen=True)
class LmcParams:
    """Coregionalization factor and per-task noise variances."""

    phi: np.ndarray  # (D, P), K_f = phi phi^T
    task_noise: np.ndarray  # (D,) positive

    def __post_init__(self):
        phi = np.atleast_2d(np.asarray(self.phi, dtype=float))
        noise = np.asarray(self.task_noise, dtype=float).ravel()
        if phi.shape[0] != noise.size:
            raise DimensionMismatch("phi rows must match task_noise length")
        if np.any(noise <= 0):
            raise ValueError("task_noise must be positive")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "task_noise", noise)

    @property
    def n_tasks(self) -> int:
        return self.phi.shape[0]

    @property
    def task_cov(self) -> np.ndarray:
        return self.phi @ self.phi.T


@dataclass(frozen=True)
class ConvParams:
    """Process-convolution sampler parameters.

    Each task d observes the shared latent function u through a normalized
    Gaussian smoothing kernel of width ``smoothing_scales[d]`` scaled by
    ``smoothing_gains[d]``; u carries the (RBF) ``latent_kernel`` evaluated
    on 1-D time and is summarized at ``latent_inputs``.
    """

    smoothing_scales: np.ndarray  # (D,) positive widths
    smoothing_gains: np.ndarray  # (D,)
    latent_inputs: np.ndarray  # (M_u,) strictly increasing times
    latent_kernel: KernelSpec
    task_noise: np.ndarray  # (D,) positive
    prediction_noise: float = 0.0

    def __post_init__(self):
        scales = np.asarray(self.smoothing_scales, dtype=float).ravel()
        gains = np.asarray(self.smoothing_gains, dtype=float).ravel()
        z = np.asarray(self.latent_inputs, dtype=float).ravel()
        noise = np.asarray(self.task_noise, dtype=float).ravel()
        if not (scales.size == gains.size == noise.size):
            raise DimensionMismatch("per-task parameter lengths differ")
        if np.any(scales <= 0):
            raise ValueError("smoothing_scales must be positive")
        if np.any(noise <= 0):
            raise ValueError("task_noise must be positive")
        if z.size == 0:
            raise ValueError("latent_inputs must be non-empty")
        if np.any(np.diff(z) <= 0):
            raise ValueError("latent_inputs must be strictly increasing")
        if self.prediction_noise < 0:
            raise ValueError("prediction_noise must be non-negative")
        if self.latent_kernel.family is not KernelFamily.RBF_ARD:
            raise UnsupportedKernel(
                "process-convolution closed forms need an RBF latent kernel"
            )
        if self.latent_kernel.input_dim != 1:
            raise DimensionMismatch("latent kernel must be over 1-D time")
        object.__setattr__(self, "smoothing_scales", scales)
        object.__setattr__(self, "smoothing_gains", gains)
        object.__setattr__(self, "latent_inputs", z)
        object.__setattr__(self, "task_noise", noise)

    @property
    def n_tasks(self) -> int:
        return self.smoothing_scales.size


@dataclass(frozen=True)
class SamplingDistribution:
    """Gaussian over the missing entries listed in (target_times, target_dims)."""

    target_times: np.ndarray  # (m,)
    target_dims: np.ndarray  # (m,)
    mean: np.ndarray  # (m,)
    variance: np.ndarray | None = None  # (m,) in diagonal mode
    covariance: np.ndarray | None = None  # (m, m) in full mode

    @property
    def diagonal(self) -> bool:
        return self.covariance is None

    @property
    def count(self) -> int:
        return self.mean.size


def _as_targets(targets) -> tuple[np.ndarray, np.ndarray]:
    targets = list(targets)
    if len(targets) == 0:
        return np.zeros(0), np.zeros(0, dtype=int)
    t = np.array([float(x[0]) for x in targets])
    d = np.array([int(x[1]) for x in targets])
    return t, d


# ---------------------------------------------------------------------------
# Linear model of coregionalization
# ---------------------------------------------------------------------------


def _lmc_cross(params, k_t, times_a, dims_a, times_b, dims_b):
    Kt = eval_kernel(k_t, np.asarray(times_a, float)[:, None], np.asarray(times_b, float)[:, None])
    Kf = params.task_cov
    return Kf[np.ix_(dims_a, dims_b)] * Kt


def _lmc_train_matrix(obs: ObservationSet, params: LmcParams, k_t: KernelSpec):
    K = _lmc_cross(params, k_t, obs.times, obs.dims, obs.times, obs.dims)
    K = K + np.diag(params.task_noise[obs.dims])
    return K


def lmc_posterior(
    obs: ObservationSet,
    params: LmcParams,
    k_t: KernelSpec,
    targets,
    diagonal: bool = True,
) -> SamplingDistribution:
    """Gaussian conditional over target entries given the observed ones.

    Targets are (time, dim) pairs, normally disjoint from the observed
    entries (not enforced; a target at an observed coordinate simply
    interpolates it).
    """
    tt, td = _as_targets(targets)
    if np.any(td >= params.n_tasks) or (td.size and td.min() < 0):
        raise DimensionMismatch("target dim index out of range")
    factor = chol_with_jitter(_lmc_train_matrix(obs, params, k_t))
    alpha = solve_psd(factor, obs.values)
    Kst = _lmc_cross(params, k_t, tt, td, obs.times, obs.dims)  # (m, n)
    mean = Kst @ alpha
    V = solve_lower(factor, Kst.T)  # (n, m)
    prior_diag = params.task_cov[td, td] * k_t.variance
    if diagonal:
        var = np.maximum(prior_diag - np.sum(V**2, axis=0), 0.0)
        return SamplingDistribution(tt, td, mean, variance=var)
    Kss = _lmc_cross(params, k_t, tt, td, tt, td)
    cov = Kss - V.T @ V
    return SamplingDistribution(tt, td, mean, covariance=0.5 * (cov + cov.T))


def lmc_log_likelihood(obs: ObservationSet, params: LmcParams, k_t: KernelSpec) -> float:
    """Exact log N(y | 0, K_f[d,d'] k_t + task-noise diagonal)."""
    factor = chol_with_jitter(_lmc_train_matrix(obs, params, k_t))
    alpha = solve_psd(factor, obs.values)
    logdet = 2.0 * float(np.sum(np.log(np.diag(factor.lower))))
    n = obs.count
    return -0.5 * (n * np.log(2.0 * np.pi) + logdet + float(obs.values @ alpha))


@dataclass(frozen=True)
class LmcGradients:
    d_log_kt: np.ndarray  # dynamical-kernel log-params
    d_phi: np.ndarray  # (D, P)
    d_log_noise: np.ndarray  # (D,)


def lmc_likelihood_gradients(
    obs: ObservationSet, params: LmcParams, k_t: KernelSpec
) -> LmcGradients:
    factor = chol_with_jitter(_lmc_train_matrix(obs, params, k_t))
    alpha = solve_psd(factor, obs.values)
    Kinv = cho_solve((factor.lower, True), np.eye(obs.count))
    dLdK = 0.5 * (np.outer(alpha, alpha) - Kinv)

    t = obs.times[:, None]
    Kf_pairs = params.task_cov[np.ix_(obs.dims, obs.dims)]
    d_log_kt = np.array(
        [float(np.sum(dLdK * Kf_pairs * g)) for g in kernel_gradients(k_t, t, t)]
    )

    # Aggregate dL/dK_f over task pairs, then push through K_f = phi phi^T.
    Kt = eval_kernel(k_t, t, t)
    W = dLdK * Kt
    D = params.n_tasks
    Madj = np.zeros((D, D))
    np.add.at(Madj, (obs.dims[:, None], obs.dims[None, :]), W)
    d_phi = (Madj + Madj.T) @ params.phi

    d_noise = np.zeros(D)
    np.add.at(d_noise, obs.dims, np.diag(dLdK))
    return LmcGradients(d_log_kt, d_phi, params.task_noise * d_noise)


# ---------------------------------------------------------------------------
# Sparse process convolution
# ---------------------------------------------------------------------------


def conv_cross_cov(
    params: ConvParams, times_a, dims_a, times_b, dims_b
) -> np.ndarray:
    """cov[f_d(t), f_d'(t')]: double Gaussian convolution of the latent RBF.

    With latent variance v_u, lengthscale l, normalized Gaussian smoothers of
    widths s_d:

        cov = g_d g_d' v_u * l / sqrt(l^2 + s_d^2 + s_d'^2)
              * exp(-(t - t')^2 / (2 (l^2 + s_d^2 + s_d'^2)))

    which tends to g_d g_d' k(t, t') as the widths shrink to zero.
    """
    ta = np.asarray(times_a, dtype=float).ravel()
    tb = np.asarray(times_b, dtype=float).ravel()
    da = np.asarray(dims_a, dtype=int).ravel()
    db = np.asarray(dims_b, dtype=int).ravel()
    ell = params.latent_kernel.lengthscales[0]
    vu = params.latent_kernel.variance
    s2 = params.smoothing_scales**2
    width = ell**2 + s2[da][:, None] + s2[db][None, :]
    diff = ta[:, None] - tb[None, :]
    gains = params.smoothing_gains
    amp = gains[da][:, None] * gains[db][None, :] * vu * ell / np.sqrt(width)
    return amp * np.exp(-0.5 * diff**2 / width)


def conv_latent_cov(params: ConvParams, times, dims, z=None) -> np.ndarray:
    """cov[f_d(t), u(z)]: single Gaussian convolution, shape (n, M_u)."""
    t = np.asarray(times, dtype=float).ravel()
    d = np.asarray(dims, dtype=int).ravel()
    if z is None:
        z = params.latent_inputs
    z = np.asarray(z, dtype=float).ravel()
    ell = params.latent_kernel.lengthscales[0]
    vu = params.latent_kernel.variance
    width = ell**2 + params.smoothing_scales[d] ** 2  # (n,)
    diff = t[:, None] - z[None, :]
    amp = params.smoothing_gains[d] * vu * ell / np.sqrt(width)
    return amp[:, None] * np.exp(-0.5 * diff**2 / width[:, None])


class _ConvWork:
    """Factorizations shared by the convolution likelihood and posterior."""

    def __init__(self, obs: ObservationSet, params: ConvParams):
        if np.any(obs.dims >= params.n_tasks) or obs.dims.min() < 0:
            raise DimensionMismatch("observation dim index out of range")
        self.obs = obs
        self.params = params
        z = params.latent_inputs[:, None]
        self.Kuu = eval_kernel(params.latent_kernel, z, z)
        self.Kuu_factor = chol_with_jitter(self.Kuu)
        self.Kfu = conv_latent_cov(params, obs.times, obs.dims)  # (n, M_u)
        self.noise = params.task_noise[obs.dims]  # (n,)
        self.alpha = obs.values / self.noise  # D^{-1} y
        A = self.Kuu + self.Kfu.T @ (self.Kfu / self.noise[:, None])
        self.A_factor = chol_with_jitter(0.5 * (A + A.T))
        self.b = self.Kfu.T @ self.alpha  # K_uf D^{-1} y
        self.beta_v = solve_psd(self.A_factor, self.b)  # A^{-1} b


def sparse_conv_log_likelihood(obs: ObservationSet, params: ConvParams) -> float:
    """Exact log-likelihood of the low-rank-plus-diagonal model.

    The model covariance is K_fu K_uu^{-1} K_uf + diag(task noise); the
    value includes all Gaussian normalization constants.
    """
    w = _ConvWork(obs, params)
    n = obs.count
    logdet_Kuu = 2.0 * float(np.sum(np.log(np.diag(w.Kuu_factor.lower))))
    logdet_A = 2.0 * float(np.sum(np.log(np.diag(w.A_factor.lower))))
    logdet_D = float(np.sum(np.log(w.noise)))
    quad = float(obs.values @ w.alpha) - float(w.b @ w.beta_v)
    return -0.5 * (
        n * np.log(2.0 * np.pi) + logdet_A - logdet_Kuu + logdet_D + quad
    )


def sparse_conv_posterior(
    obs: ObservationSet,
    params: ConvParams,
    targets,
    diagonal: bool = True,
) -> SamplingDistribution:
    """Low-rank Gaussian conditional over target entries, O(n M_u^2)."""
    tt, td = _as_targets(targets)
    if np.any(td >= params.n_tasks) or (td.size and td.min() < 0):
        raise DimensionMismatch("target dim index out of range")
    w = _ConvWork(obs, params)
    Ksu = conv_latent_cov(params, tt, td)  # (m, M_u)
    mean = Ksu @ w.beta_v
    # Variance: K_ss - K_su K_uu^{-1} K_us + K_su A^{-1} K_us + prediction noise
    Vu = solve_lower(w.Kuu_factor, Ksu.T)  # (M_u, m)
    Va = solve_lower(w.A_factor, Ksu.T)
    if diagonal:
        prior_diag = np.diag(conv_cross_cov(params, tt, td, tt, td)) if tt.size else np.zeros(0)
        var = prior_diag - np.sum(Vu**2, axis=0) + np.sum(Va**2, axis=0)
        var = np.maximum(var + params.prediction_noise, 0.0)
        return SamplingDistribution(tt, td, mean, variance=var)
    Kss = conv_cross_cov(params, tt, td, tt, td)
    cov = Kss - Vu.T @ Vu + Va.T @ Va + params.prediction_noise * np.eye(tt.size)
    return SamplingDistribution(tt, td, mean, covariance=0.5 * (cov + cov.T))


@dataclass(frozen=True)
class ConvGradients:
    d_log_latent: np.ndarray  # latent (dynamical) kernel log-params
    d_gains: np.ndarray  # (D,)
    d_log_scales: np.ndarray  # (D,)
    d_log_noise: np.ndarray  # (D,)


def conv_likelihood_gradients(obs: ObservationSet, params: ConvParams) -> ConvGradients:
    """Analytic gradients of :func:`sparse_conv_log_likelihood`."""
    w = _ConvWork(obs, params)
    Mu = params.latent_inputs.size
    Ainv = cho_solve((w.A_factor.lower, True), np.eye(Mu))
    Kuu_inv = cho_solve((w.Kuu_factor.lower, True), np.eye(Mu))
    T = -0.5 * (Ainv + np.outer(w.beta_v, w.beta_v))

    d_Kuu = T + 0.5 * Kuu_inv  # (M_u, M_u)
    # dL/dK_fu (n, M_u): transpose of 2 T K_uf D^{-1} + beta_v alpha^T
    d_Kfu = 2.0 * (w.Kfu / w.noise[:, None]) @ T + np.outer(w.alpha, w.beta_v)

    # Noise gradient per entry.
    TKuf = T @ w.Kfu.T  # (M_u, n)
    rTr = np.sum(w.Kfu * TKuf.T, axis=1)  # r_i T r_i^T
    Kfu_beta = w.Kfu @ w.beta_v
    dD = (
        -0.5 / w.noise
        + 0.5 * w.alpha**2
        - rTr / w.noise**2
        - w.alpha * Kfu_beta / w.noise
    )
    D = params.n_tasks
    d_log_noise = np.zeros(D)
    np.add.at(d_log_noise, obs.dims, dD)
    d_log_noise *= params.task_noise

    # Chain the covariance adjoints to the convolution parameters.
    ell = params.latent_kernel.lengthscales[0]
    z = params.latent_inputs
    s2 = params.smoothing_scales[obs.dims] ** 2  # (n,)
    v = ell**2 + s2  # (n,)
    delta = obs.times[:, None] - z[None, :]  # (n, M_u)
    AK = d_Kfu * w.Kfu  # adjoint times value, reused below

    # log latent variance: both K_uu and K_fu scale linearly with it.
    d_log_var = float(np.sum(d_Kuu * w.Kuu)) + float(np.sum(AK))
    # log latent lengthscale.
    kuu_grads = kernel_gradients(params.latent_kernel, z[:, None], z[:, None])
    d_log_ell = float(np.sum(d_Kuu * kuu_grads[1]))
    d_log_ell += float(
        np.sum(AK * (1.0 - (ell**2 / v)[:, None] + delta**2 * (ell**2 / v**2)[:, None]))
    )
    d_log_latent = np.array([d_log_var, d_log_ell])

    # Gains: K_fu is linear in the gain of each entry's task.
    d_gains = np.zeros(D)
    base = (params.latent_kernel.variance * ell / np.sqrt(v))[:, None] * np.exp(
        -0.5 * delta**2 / v[:, None]
    )
    np.add.at(d_gains, obs.dims, np.sum(d_Kfu * base, axis=1))

    # log smoothing scales: d log K_fu / d log s = s^2 (delta^2 - v) / v^2.
    scale_term = np.sum(AK * ((delta**2 - v[:, None]) * (s2 / v**2)[:, None]), axis=1)
    d_log_scales = np.zeros(D)
    np.add.at(d_log_scales, obs.dims, scale_term)

    return ConvGradients(d_log_latent, d_gains, d_log_scales, d_log_noise)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def draw_samples(dist: SamplingDistribution, mode: str, seed) -> np.ndarray:
    """Imputed values for the distribution's targets.

    ``mode`` is "mean" (returns the posterior mean) or "sample" (one joint
    Gaussian draw, deterministic under the seed).
    """
    if mode not in ("mean", "sample"):
        raise ValueError(f"unknown imputation mode: {mode!r}")
    if mode == "mean" or dist.count == 0:
        return dist.mean.copy()
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(dist.count)
    if dist.diagonal:
        return dist.mean + np.sqrt(np.maximum(dist.variance, 0.0)) * eps
    cov = dist.covariance
    evals, evecs = np.linalg.eigh(cov)
    floor = -1e-10 * max(float(np.trace(cov)), 1.0)
    if evals.min() < floor:
        raise NotPositiveDefinite(
            f"sampling covariance has eigenvalue {evals.min():.3e}"
        )
    root = evecs * np.sqrt(np.maximum(evals, 0.0))[None, :]
    return dist.mean + root @ eps
