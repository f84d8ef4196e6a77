"""Exception hierarchy shared by all modules."""


class ManifoldError(Exception):
    """Base class for every error raised by rdsmanifold."""


class ConfigurationError(ManifoldError, ValueError):
    """Invalid grid, model, dimension or configuration value."""


class AlignmentError(ManifoldError, ValueError):
    """A time is not a multiple of the grid step."""


class InsufficientPathError(ManifoldError, ValueError):
    """A sampled path or OU sample does not cover the requested window."""


class DichotomyViolationError(ManifoldError, ValueError):
    """Backward-in-time evolution requested on the stable subspace."""


class InvalidModelError(ManifoldError, ValueError):
    """Spectral data does not define an exponential dichotomy."""


class GapConditionError(ManifoldError):
    """A spectral gap inequality fails, so contraction is not certified."""

    def __init__(self, message, order=None, inequality=None):
        super().__init__(message)
        self.order = order
        self.inequality = inequality


class InputError(ManifoldError, ValueError):
    """Input state lies outside the subspace the operation expects."""


class ConvergenceError(ManifoldError):
    """Fixed-point iteration did not reach tolerance."""

    def __init__(self, message, measured_ratio=None, iterations=None):
        super().__init__(message)
        self.measured_ratio = measured_ratio
        self.iterations = iterations
