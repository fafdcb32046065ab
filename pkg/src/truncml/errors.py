"""Exception types raised across the package."""


class TruncMLError(Exception):
    """Base class for all package errors."""


class DomainError(TruncMLError, ValueError):
    """An argument lies outside the domain where an operation is defined."""


class QuadratureError(TruncMLError, ArithmeticError):
    """Numerical integration or series evaluation missed its tolerance.

    Attributes
    ----------
    error_estimate : float
        The achieved (absolute) error estimate when the routine gave up.
    """

    def __init__(self, message, error_estimate=float("nan")):
        super().__init__(message)
        self.error_estimate = error_estimate


class NumericError(TruncMLError, ArithmeticError):
    """An iterative linear algebra routine failed to converge."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class NotPositiveDefiniteError(TruncMLError, ArithmeticError):
    """A covariance matrix is not positive definite where that is required."""


class FitError(TruncMLError, RuntimeError):
    """No optimizer start produced a finite objective."""
