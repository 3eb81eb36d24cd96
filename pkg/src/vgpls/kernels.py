"""Covariance functions with analytic log-hyperparameter gradients.

Three families: RBF with per-dimension (ARD) lengthscales, an exp-sine-squared
periodic kernel over 1-D time, and white noise. Scale parameters are strictly
positive and are exposed to optimizers through log-space pack/unpack helpers.
"""

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch


class KernelFamily(enum.Enum):
    RBF_ARD = "rbf"
    PERIODIC = "periodic"
    WHITE_NOISE = "white"


@dataclass(frozen=True)
class KernelSpec:
    """Immutable kernel description.

    ``lengthscales`` has one entry per input dimension for RBF_ARD, exactly
    one for PERIODIC, and is empty for WHITE_NOISE. ``period`` is only
    meaningful for PERIODIC.
    """

    family: KernelFamily
    variance: float
    lengthscales: tuple = field(default=())
    period: float | None = None
    input_dim: int = 1

    def __post_init__(self):
        if self.variance <= 0:
            raise ValueError("variance must be positive")
        if any(l <= 0 for l in self.lengthscales):
            raise ValueError("lengthscales must be positive")
        if self.family is KernelFamily.RBF_ARD:
            if len(self.lengthscales) != self.input_dim:
                raise DimensionMismatch(
                    f"RBF-ARD needs {self.input_dim} lengthscales, "
                    f"got {len(self.lengthscales)}"
                )
        elif self.family is KernelFamily.PERIODIC:
            if self.input_dim != 1:
                raise DimensionMismatch("periodic kernel is defined over 1-D time")
            if len(self.lengthscales) != 1:
                raise DimensionMismatch("periodic kernel takes a single lengthscale")
            if self.period is None or self.period <= 0:
                raise ValueError("periodic kernel needs a positive period")
        elif self.family is KernelFamily.WHITE_NOISE:
            if self.lengthscales:
                raise DimensionMismatch("white-noise kernel has no lengthscales")

    @property
    def ard_weights(self) -> np.ndarray:
        """Inverse squared lengthscales (ARD relevance weights, unnormalized)."""
        return 1.0 / np.asarray(self.lengthscales, dtype=float) ** 2


def rbf_ard(variance: float, lengthscales) -> KernelSpec:
    ls = tuple(float(l) for l in np.atleast_1d(lengthscales))
    return KernelSpec(KernelFamily.RBF_ARD, float(variance), ls, None, len(ls))


def periodic(variance: float, lengthscale: float, period: float) -> KernelSpec:
    return KernelSpec(
        KernelFamily.PERIODIC, float(variance), (float(lengthscale),), float(period), 1
    )


def white_noise(variance: float, input_dim: int = 1) -> KernelSpec:
    return KernelSpec(KernelFamily.WHITE_NOISE, float(variance), (), None, input_dim)


def n_log_params(spec: KernelSpec) -> int:
    if spec.family is KernelFamily.RBF_ARD:
        return 1 + spec.input_dim
    if spec.family is KernelFamily.PERIODIC:
        return 3
    return 1


def to_log_params(spec: KernelSpec) -> np.ndarray:
    """Flatten to the optimizer's log-space vector.

    Order: log variance, log lengthscales (in dimension order), log period.
    """
    parts = [np.log(spec.variance)]
    parts.extend(np.log(l) for l in spec.lengthscales)
    if spec.family is KernelFamily.PERIODIC:
        parts.append(np.log(spec.period))
    return np.array(parts)


def from_log_params(spec: KernelSpec, vec: np.ndarray) -> KernelSpec:
    """Rebuild a spec of the same family from a log-space vector."""
    vec = np.asarray(vec, dtype=float)
    if vec.size != n_log_params(spec):
        raise DimensionMismatch(
            f"expected {n_log_params(spec)} log-parameters, got {vec.size}"
        )
    variance = float(np.exp(vec[0]))
    if spec.family is KernelFamily.RBF_ARD:
        ls = tuple(np.exp(vec[1:]))
        return KernelSpec(spec.family, variance, ls, None, spec.input_dim)
    if spec.family is KernelFamily.PERIODIC:
        return KernelSpec(
            spec.family, variance, (float(np.exp(vec[1])),), float(np.exp(vec[2])), 1
        )
    return KernelSpec(spec.family, variance, (), None, spec.input_dim)


def _check_inputs(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != spec.input_dim:
        raise DimensionMismatch(
            f"kernel expects {spec.input_dim} input columns, got {X.shape[1]}"
        )
    return X


def _sqdist_weighted(X1: np.ndarray, X2: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Explicit pairwise differences: exactly stationary and never negative,
    # unlike the expanded square. Fine at desk scale.
    diff = X1[:, None, :] - X2[None, :, :]
    return np.einsum("nmq,q->nm", diff**2, w)


def eval_kernel(spec: KernelSpec, X1: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Covariance matrix K[i, j] = k(X1_i, X2_j)."""
    same = X1 is X2
    X1 = _check_inputs(spec, X1)
    X2 = X1 if same else _check_inputs(spec, X2)

    if spec.family is KernelFamily.RBF_ARD:
        d2 = _sqdist_weighted(X1, X2, spec.ard_weights)
        return spec.variance * np.exp(-0.5 * d2)
    if spec.family is KernelFamily.PERIODIC:
        diff = X1[:, 0][:, None] - X2[:, 0][None, :]
        s = np.sin(np.pi * np.abs(diff) / spec.period)
        ell2 = spec.lengthscales[0] ** 2
        return spec.variance * np.exp(-2.0 * s**2 / ell2)
    # White noise couples a point only with itself, which is only
    # well-defined when both arguments are the same array.
    K = np.zeros((X1.shape[0], X2.shape[0]))
    if same:
        np.fill_diagonal(K, spec.variance)
    return K


def eval_kernel_diag(spec: KernelSpec, X: np.ndarray) -> np.ndarray:
    """Vector of k(x_i, x_i); cheap path for stationary kernels."""
    X = _check_inputs(spec, X)
    return np.full(X.shape[0], spec.variance)


def kernel_gradients(spec: KernelSpec, X1: np.ndarray, X2: np.ndarray) -> list:
    """d K / d(log theta) in the order of :func:`to_log_params`."""
    same = X1 is X2
    K = eval_kernel(spec, X1, X2)
    X1 = _check_inputs(spec, X1)
    X2 = X1 if same else _check_inputs(spec, X2)

    if spec.family is KernelFamily.RBF_ARD:
        grads = [K.copy()]
        w = spec.ard_weights
        for q in range(spec.input_dim):
            dq2 = (X1[:, q][:, None] - X2[:, q][None, :]) ** 2
            grads.append(K * w[q] * dq2)
        return grads
    if spec.family is KernelFamily.PERIODIC:
        diff = np.abs(X1[:, 0][:, None] - X2[:, 0][None, :])
        ell2 = spec.lengthscales[0] ** 2
        p = spec.period
        s = np.sin(np.pi * diff / p)
        d_log_ell = K * 4.0 * s**2 / ell2
        d_log_p = K * (2.0 * np.pi * diff / (p * ell2)) * np.sin(2.0 * np.pi * diff / p)
        return [K.copy(), d_log_ell, d_log_p]
    return [K.copy()]


def rbf_input_gradients(
    spec: KernelSpec, X1: np.ndarray, X2: np.ndarray, adj: np.ndarray
) -> np.ndarray:
    """VJP of an RBF-ARD matrix with respect to its first argument.

    Returns d(sum(adj * K))/dX1, shape like X1. Used for inducing-location
    gradients; the second-argument gradient follows by transposing ``adj``.
    """
    same = X1 is X2
    K = eval_kernel(spec, X1, X2)
    X1 = _check_inputs(spec, X1)
    X2 = X1 if same else _check_inputs(spec, X2)
    A = adj * K
    w = spec.ard_weights
    # dK/dx1_iq = -w_q (x1_iq - x2_jq) K_ij
    out = -(A @ X2) + X1 * A.sum(axis=1)[:, None]
    return -out * w[None, :]
