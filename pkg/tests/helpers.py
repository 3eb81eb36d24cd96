"""Shared test utilities."""

import numpy as np

from vgpls.numerics import finite_diff_grad


def assert_grad_close(f, x0, analytic, rtol=1e-4, h=1e-5, atol_floor=1e-8):
    """Compare an analytic gradient against central differences.

    Relative error is measured blockwise over the whole vector with an
    absolute floor so zero gradients do not trip the relative test.
    """
    x0 = np.asarray(x0, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    numeric = finite_diff_grad(f, x0, h=h)
    scale = max(float(np.linalg.norm(numeric)), atol_floor)
    err = float(np.linalg.norm(analytic - numeric)) / scale
    assert err <= rtol, (
        f"gradient mismatch: rel err {err:.3e} > {rtol:.0e}\n"
        f"analytic={analytic}\nnumeric ={numeric}"
    )


def random_psd(rng, n, scale=1.0):
    A = rng.standard_normal((n, n))
    return scale * (A @ A.T) / n + 0.5 * scale * np.eye(n)
