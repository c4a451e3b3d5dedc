"""Exception types raised across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical divergence with 3 and I/O failures with 4.
"""


class NloxError(Exception):
    """Base class for all package errors."""


class ConfigError(NloxError, ValueError):
    pass


class NumericalError(NloxError, ArithmeticError):
    """A computation produced non-finite values or hit a singularity."""


class IntegrationError(NumericalError):
    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class QuadratureError(NumericalError):
    def __init__(self, message, abscissa=None):
        super().__init__(message)
        self.abscissa = abscissa


class SingularMatrixError(NumericalError):
    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class DomainError(NumericalError):
    """A state left the admissible set of a plant or observer."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DivergenceError(NumericalError):
    """An observer or training run blew up."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ModelEvaluationError(NumericalError):
    pass


class FilterDivergenceError(DivergenceError):
    """The EKF covariance lost positive definiteness."""


class ModelFileError(NloxError, OSError):
    pass
