"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: usage problems exit 1,
data problems exit 2, numeric failures exit 3.
"""


class MvrankError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MvrankError):
    """Malformed arguments: non-finite entries, shape mismatches, bad ranges."""


class DataError(MvrankError):
    """Problems with dataset files or dataset contents."""


class DegenerateCovarianceError(MvrankError):
    """Covariance matrix is singular or otherwise unusable even after jitter."""


class DegenerateVarianceError(DegenerateCovarianceError):
    """Projected variance of a difference vector is not strictly positive."""


class UndefinedMetricError(MvrankError):
    """A metric is undefined on the given inputs (e.g. zero-variance series)."""


class NumericError(MvrankError):
    """Non-finite objective or unrecoverable numeric failure during training."""
