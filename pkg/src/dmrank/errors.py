"""Exception hierarchy shared across the package."""


class DmrError(Exception):
    """Base class for all package errors."""


class EmptyComparisonError(DmrError, ValueError):
    """A pair has no aspect observed on both sides (or a zero difference)."""


class SingularCovarianceError(DmrError, ValueError):
    """A covariance matrix could not be factorized."""


class QuadratureError(DmrError, RuntimeError):
    """Adaptive quadrature did not converge."""


class DataError(DmrError, ValueError):
    """Malformed or inconsistent rating data."""


class NoComparablePairsError(DataError):
    """No user has two co-rated items to compare."""


class TrainingDivergence(DmrError, FloatingPointError):
    """The objective became non-finite during training."""
