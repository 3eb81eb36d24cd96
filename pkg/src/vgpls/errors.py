"""Exception types shared across the package."""

import numpy as np


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Matrix could not be factorized even after the jitter ladder."""


class NotSymmetric(ValueError):
    """Matrix deviates from symmetry beyond tolerance."""


class NonFiniteEvaluation(ArithmeticError):
    """A function probe returned NaN or infinity."""


class DimensionMismatch(ValueError):
    """Array shapes are inconsistent with the operation's contract."""


class UnsupportedKernel(ValueError):
    """Operation has no closed form for the requested kernel family."""


class EmptyObservations(ValueError):
    """An observation set with zero entries was supplied."""


class InsufficientData(ValueError):
    """Too few observations to initialize the model."""


class DegenerateTime(ValueError):
    """Duplicate or non-increasing timestamps."""


class NonFiniteObjective(ArithmeticError):
    """Training objective became NaN or infinite."""


class DensityTooLow(ValueError):
    """Requested observation density cannot satisfy coverage constraints."""


class MissingGroundTruth(ValueError):
    """Dataset has no ground-truth matrix attached."""


class EmptyDimension(ValueError):
    """A data dimension has no observed entries."""
