"""Dense linear-algebra primitives and a finite-difference gradient oracle.

Everything here operates on plain float64 numpy arrays. Matrices are small
(a few hundred rows at most), so all factorizations are dense Cholesky.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import NonFiniteEvaluation, NotPositiveDefinite, NotSymmetric

SYMMETRY_RTOL = 1e-10

# Jitter ladder: relative to the mean diagonal, start at 1e-10 and grow by
# tens; the default cap keeps silent regularization from dominating.
JITTER_START_REL = 1e-10
JITTER_MAX_REL = 1e-2


@dataclass(frozen=True)
class PsdFactor:
    """Lower Cholesky factor of A + jitter*I for a symmetric PSD matrix A.

    ``lower @ lower.T`` reproduces the (jittered) input; ``jitter`` records
    the additive diagonal that was needed for the factorization to succeed.
    """

    lower: np.ndarray
    jitter: float

    @property
    def n(self) -> int:
        return self.lower.shape[0]


def chol_with_jitter(A: np.ndarray, max_jitter: float | None = None) -> PsdFactor:
    """Cholesky-factorize a symmetric matrix, escalating diagonal jitter.

    Tries jitter 0 first, then ``1e-10 * mean(diag(A))`` growing tenfold per
    attempt, up to ``max_jitter`` (default ``1e-2 * mean(diag(A))``).

    Raises
    ------
    NotSymmetric
        If ``A`` deviates from its transpose by more than 1e-10 relative.
    NotPositiveDefinite
        If the ladder is exhausted without a successful factorization.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotSymmetric(f"expected a square matrix, got shape {A.shape}")
    scale = np.linalg.norm(A)
    asym = np.linalg.norm(A - A.T)
    if asym > SYMMETRY_RTOL * max(scale, 1.0):
        raise NotSymmetric(
            f"matrix asymmetry {asym:.3e} exceeds tolerance {SYMMETRY_RTOL:.0e} "
            f"relative to norm {scale:.3e}"
        )
    A = 0.5 * (A + A.T)

    mean_diag = float(np.mean(np.diag(A))) if A.shape[0] else 0.0
    if max_jitter is None:
        max_jitter = JITTER_MAX_REL * abs(mean_diag)
    if max_jitter < 0:
        raise ValueError("max_jitter must be non-negative")

    jitter = 0.0
    eye = np.eye(A.shape[0])
    while True:
        try:
            lower = np.linalg.cholesky(A + jitter * eye)
            return PsdFactor(lower=lower, jitter=jitter)
        except np.linalg.LinAlgError:
            if jitter == 0.0:
                jitter = JITTER_START_REL * abs(mean_diag)
                if jitter == 0.0:
                    break
            else:
                jitter *= 10.0
            if jitter > max_jitter:
                break
    raise NotPositiveDefinite(
        f"matrix not positive definite with jitter up to {max_jitter:.3e}"
    )


def logdet_psd(factor: PsdFactor) -> float:
    """Log-determinant of the factorized matrix, 2*sum(log(diag(L)))."""
    return 2.0 * float(np.sum(np.log(np.diag(factor.lower))))


def solve_psd(factor: PsdFactor, b: np.ndarray) -> np.ndarray:
    """Solve (A + jitter*I) x = b using the stored Cholesky factor."""
    return cho_solve((factor.lower, True), np.asarray(b, dtype=float))


def solve_lower(factor: PsdFactor, b: np.ndarray) -> np.ndarray:
    """Solve L x = b for the lower-triangular factor L."""
    return solve_triangular(factor.lower, np.asarray(b, dtype=float), lower=True)


def inv_psd(factor: PsdFactor) -> np.ndarray:
    """Explicit inverse of the factorized matrix. Use sparingly."""
    return cho_solve((factor.lower, True), np.eye(factor.n))


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector.

    The shared correctness oracle for every analytic gradient in the
    package: O(h^2) error so 1e-4 relative agreement is attainable with the
    default h on unit-scaled parameters.
    """
    x = np.asarray(x, dtype=float)
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.empty_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        hi = float(f(x + step))
        lo = float(f(x - step))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteEvaluation(
                f"non-finite probe at coordinate {i}: f(x+h)={hi}, f(x-h)={lo}"
            )
        grad.flat[i] = (hi - lo) / (2.0 * h)
    return grad
