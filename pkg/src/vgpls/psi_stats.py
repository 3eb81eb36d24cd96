"""Expectations of RBF-ARD kernel matrices under a Gaussian posterior.

The three statistics are the only way the latent posterior enters the
collapsed bound:

  psi0 = E[ trace K_NN ]            (scalar)
  psi1 = E[ K_NM ]                  (N x M)
  psi2 = E[ K_MN K_NM ]             (M x M)

with the expectation taken over independent per-point Gaussians
N(means[n], diag(variances[n])). Closed forms exist for RBF-ARD only; a
seeded Monte-Carlo estimator doubles as an independent oracle for them.

Closed forms used (per point n, inducing location z_m, ARD weight
w_q = 1 / lengthscale_q^2):

  psi1[n,m] = var_f * prod_q (1 + w_q S_nq)^(-1/2)
              * exp(-0.5 * w_q (mu_nq - z_mq)^2 / (1 + w_q S_nq))

  psi2[m,m'] = sum_n var_f^2 * prod_q (1 + 2 w_q S_nq)^(-1/2)
               * exp(-0.25 * w_q (z_mq - z_m'q)^2
                     - w_q (mu_nq - zbar_q)^2 / (1 + 2 w_q S_nq)),
               zbar = (z_m + z_m') / 2

both of which reduce to the plain kernel matrices at S = 0.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, UnsupportedKernel
from .kernels import KernelFamily, KernelSpec, eval_kernel


@dataclass(frozen=True)
class GaussianMarginals:
    """Per-point posterior means and diagonal variances of the latents."""

    means: np.ndarray  # (N, Q)
    variances: np.ndarray  # (N, Q), elementwise >= 0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        variances = np.asarray(self.variances, dtype=float)
        if means.shape != variances.shape or means.ndim != 2:
            raise DimensionMismatch(
                f"means {means.shape} and variances {variances.shape} must be "
                "equal-shape 2-D arrays"
            )
        if np.any(variances < 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "variances", variances)

    @property
    def n_points(self) -> int:
        return self.means.shape[0]

    @property
    def n_dims(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class PsiStatistics:
    psi0: float
    psi1: np.ndarray  # (N, M)
    psi2: np.ndarray  # (M, M)


@dataclass(frozen=True)
class PsiGradients:
    """Gradient of w0*psi0 + <W1, psi1> + <W2, psi2> w.r.t. all inputs."""

    d_means: np.ndarray  # (N, Q)
    d_variances: np.ndarray  # (N, Q)
    d_log_hyperparams: np.ndarray  # (1 + Q,): log variance, log lengthscales
    d_inducing: np.ndarray  # (M, Q)


def _require_rbf(kernel: KernelSpec):
    if kernel.family is not KernelFamily.RBF_ARD:
        raise UnsupportedKernel(
            "closed-form kernel expectations exist only for the RBF-ARD family"
        )


def _check_shapes(q: GaussianMarginals, kernel: KernelSpec, Z: np.ndarray) -> np.ndarray:
    _require_rbf(kernel)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != q.n_dims:
        raise DimensionMismatch(
            f"inducing locations {Z.shape} incompatible with Q={q.n_dims}"
        )
    if kernel.input_dim != q.n_dims:
        raise DimensionMismatch(
            f"kernel input_dim {kernel.input_dim} != posterior Q {q.n_dims}"
        )
    return Z


def psi0(q: GaussianMarginals, kernel: KernelSpec) -> float:
    """E[trace K_NN]; for a stationary kernel this is N * variance."""
    _require_rbf(kernel)
    return q.n_points * kernel.variance


def psi1(q: GaussianMarginals, kernel: KernelSpec, Z: np.ndarray) -> np.ndarray:
    Z = _check_shapes(q, kernel, Z)
    w = kernel.ard_weights  # (Q,)
    gamma = 1.0 + w[None, :] * q.variances  # (N, Q)
    delta = q.means[:, None, :] - Z[None, :, :]  # (N, M, Q)
    expo = -0.5 * np.sum(w[None, None, :] * delta**2 / gamma[:, None, :], axis=2)
    scale = np.prod(gamma, axis=1) ** -0.5  # (N,)
    return kernel.variance * scale[:, None] * np.exp(expo)


def _psi2_per_point(q: GaussianMarginals, kernel: KernelSpec, Z: np.ndarray):
    """Tensor T[n, m, m'] whose sum over n is psi2, plus reusable factors."""
    w = kernel.ard_weights
    eta = 1.0 + 2.0 * w[None, :] * q.variances  # (N, Q)
    d = Z[:, None, :] - Z[None, :, :]  # (M, M, Q)
    zbar = 0.5 * (Z[:, None, :] + Z[None, :, :])  # (M, M, Q)
    e = q.means[:, None, None, :] - zbar[None, :, :, :]  # (N, M, M, Q)
    expo = -0.25 * np.sum(w[None, None, :] * d**2, axis=2)[None, :, :] - np.sum(
        w[None, None, None, :] * e**2 / eta[:, None, None, :], axis=3
    )
    scale = np.prod(eta, axis=1) ** -0.5  # (N,)
    T = kernel.variance**2 * scale[:, None, None] * np.exp(expo)
    return T, w, eta, d, e


def psi2(q: GaussianMarginals, kernel: KernelSpec, Z: np.ndarray) -> np.ndarray:
    Z = _check_shapes(q, kernel, Z)
    T, *_ = _psi2_per_point(q, kernel, Z)
    out = T.sum(axis=0)
    return 0.5 * (out + out.T)


def psi2_terms(q: GaussianMarginals, kernel: KernelSpec, Z: np.ndarray) -> np.ndarray:
    """Per-point psi2 contributions, shape (N, M, M); sums to psi2 over axis 0."""
    Z = _check_shapes(q, kernel, Z)
    T, *_ = _psi2_per_point(q, kernel, Z)
    return 0.5 * (T + np.swapaxes(T, 1, 2))


def psi_statistics(q: GaussianMarginals, kernel: KernelSpec, Z: np.ndarray) -> PsiStatistics:
    return PsiStatistics(psi0(q, kernel), psi1(q, kernel, Z), psi2(q, kernel, Z))


def psi_gradients(
    q: GaussianMarginals,
    kernel: KernelSpec,
    Z: np.ndarray,
    w0: float = 0.0,
    W1: np.ndarray | None = None,
    W2: np.ndarray | None = None,
) -> PsiGradients:
    """Gradients of the weighted sum w0*psi0 + <W1,psi1> + <W2,psi2>.

    This is the contraction the bound's chain rule needs; full Jacobians are
    recovered by one-hot weight matrices.
    """
    Z = _check_shapes(q, kernel, Z)
    N, Q = q.means.shape
    M = Z.shape[0]
    w = kernel.ard_weights
    d_means = np.zeros((N, Q))
    d_vars = np.zeros((N, Q))
    d_Z = np.zeros((M, Q))
    d_log_var = 0.0
    d_log_ell = np.zeros(Q)

    # psi0 = N * variance depends on log variance only.
    d_log_var += w0 * q.n_points * kernel.variance

    if W1 is not None:
        W1 = np.asarray(W1, dtype=float)
        if W1.shape != (N, M):
            raise DimensionMismatch(f"W1 shape {W1.shape} != {(N, M)}")
        gamma = 1.0 + w[None, :] * q.variances  # (N, Q)
        delta = q.means[:, None, :] - Z[None, :, :]  # (N, M, Q)
        A1 = W1 * psi1(q, kernel, Z)  # (N, M)
        r = delta / gamma[:, None, :]  # delta / gamma
        d_means += -np.einsum("nm,nmq,q->nq", A1, r, w)
        d_Z += np.einsum("nm,nmq,q->mq", A1, r, w)
        d_vars += 0.5 * np.einsum(
            "nm,nmq->nq", A1, (w[None, None, :] ** 2 * delta**2 / gamma[:, None, :] - w[None, None, :])
            / gamma[:, None, :],
        )
        d_log_var += float(A1.sum())
        d_log_ell += np.einsum(
            "nm,nmq->q",
            A1,
            w[None, None, :]
            * (q.variances[:, None, :] / gamma[:, None, :] + delta**2 / gamma[:, None, :] ** 2),
        )

    if W2 is not None:
        W2 = np.asarray(W2, dtype=float)
        if W2.shape != (M, M):
            raise DimensionMismatch(f"W2 shape {W2.shape} != {(M, M)}")
        T, w_, eta, d, e = _psi2_per_point(q, kernel, Z)
        A2 = W2[None, :, :] * T  # (N, M, M)
        einv = e / eta[:, None, None, :]  # (N, M, M, Q)
        d_means += -2.0 * np.einsum("nij,nijq,q->nq", A2, einv, w)
        d_vars += np.einsum(
            "nij,nijq->nq",
            A2,
            (2.0 * w[None, None, None, :] ** 2 * e**2 / eta[:, None, None, :]
             - w[None, None, None, :])
            / eta[:, None, None, :],
        )
        # z_m enters pair (i, j) through d when i==m or j==m (opposite signs)
        # and through zbar in both roles.
        half_wd = 0.5 * w[None, None, :] * d  # (M, M, Q)
        w_einv = w[None, None, None, :] * einv  # (N, M, M, Q)
        d_Z += np.einsum("nmj,nmjq->mq", A2, -half_wd[None, :, :, :] + w_einv)
        d_Z += np.einsum("nim,nimq->mq", A2, half_wd[None, :, :, :] + w_einv)
        d_log_var += 2.0 * float(A2.sum())
        d_log_ell += np.einsum(
            "nij,nijq->q",
            A2,
            w[None, None, None, :]
            * (
                2.0 * q.variances[:, None, None, :] / eta[:, None, None, :]
                + 0.25 * d[None, :, :, :] ** 2 * 2.0
                + 2.0 * e**2 / eta[:, None, None, :] ** 2
            ),
        )

    d_log_hp = np.concatenate([[d_log_var], d_log_ell])
    return PsiGradients(d_means, d_vars, d_log_hp, d_Z)


def psi_monte_carlo(
    q: GaussianMarginals,
    kernel: KernelSpec,
    Z: np.ndarray,
    n_samples: int,
    seed: int,
) -> tuple[PsiStatistics, PsiStatistics]:
    """Sample-mean estimates of the three expectations, with standard errors.

    Returns ``(estimates, standard_errors)``; deterministic under the seed.
    Serves as the independent oracle for the closed forms above.
    """
    Z = _check_shapes(q, kernel, Z)
    N, Q = q.means.shape
    M = Z.shape[0]
    rng = np.random.default_rng(seed)
    sd = np.sqrt(q.variances)

    # Accumulate deviations around a first-sample reference so that the
    # degenerate S = 0 case yields exactly zero standard errors.
    ref1 = None
    ref2 = None
    dev1 = np.zeros((N, M))
    devsq1 = np.zeros((N, M))
    dev2 = np.zeros((M, M))
    devsq2 = np.zeros((M, M))
    chunk = max(1, min(n_samples, int(2e6 // max(N * M, 1))))
    done = 0
    while done < n_samples:
        c = min(chunk, n_samples - done)
        eps = rng.standard_normal((c, N, Q))
        X = q.means[None, :, :] + sd[None, :, :] * eps  # (c, N, Q)
        # K(X_s, Z) for every sample in the chunk.
        d2 = np.sum(
            kernel.ard_weights[None, None, None, :]
            * (X[:, :, None, :] - Z[None, None, :, :]) ** 2,
            axis=3,
        )
        Ks = kernel.variance * np.exp(-0.5 * d2)  # (c, N, M)
        P2 = np.einsum("cnm,cnk->cmk", Ks, Ks)  # (c, M, M)
        if ref1 is None:
            ref1 = Ks[0].copy()
            ref2 = P2[0].copy()
        d1 = Ks - ref1[None, :, :]
        d2_ = P2 - ref2[None, :, :]
        dev1 += d1.sum(axis=0)
        devsq1 += (d1**2).sum(axis=0)
        dev2 += d2_.sum(axis=0)
        devsq2 += (d2_**2).sum(axis=0)
        done += c

    mean1 = ref1 + dev1 / n_samples
    mean2 = ref2 + dev2 / n_samples
    var1 = np.maximum(devsq1 / n_samples - (dev1 / n_samples) ** 2, 0.0)
    var2 = np.maximum(devsq2 / n_samples - (dev2 / n_samples) ** 2, 0.0)
    se1 = np.sqrt(var1 / n_samples)
    se2 = np.sqrt(var2 / n_samples)
    # psi0 is deterministic for a stationary kernel.
    est = PsiStatistics(q.n_points * kernel.variance, mean1, mean2)
    se = PsiStatistics(0.0, se1, se2)
    return est, se
