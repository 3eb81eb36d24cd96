"""Variational GP latent-variable modeling for sparsely observed longitudinal data."""

from . import bound, data_eval, kernels, multioutput, numerics, psi_stats, trainer, variational

__all__ = [
    "bound",
    "data_eval",
    "kernels",
    "multioutput",
    "numerics",
    "psi_stats",
    "trainer",
    "variational",
]

__version__ = "0.1.0"
