"""Exception types raised by the accim pipeline."""


class AccimError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AccimError, ValueError):
    """Invalid configuration value or malformed config file."""


class UndefinedPointError(AccimError, ValueError):
    """A point lies outside every branch domain of the map."""


class EmptyReducedDomainError(AccimError):
    """Domain reduction kept no cells, so no conditionally invariant density
    is representable at this resolution."""


class DualDivergenceError(AccimError, FloatingPointError):
    """The dual iteration left the representable range.

    This is the signature of an infeasible (for instance unreduced) dual
    problem, whose supremum is not attained at finite multipliers.
    """


class NonConvergenceError(AccimError):
    """The fixed-point iteration did not reach the requested tolerance."""

    def __init__(self, message, last_delta=None, iterations=None):
        super().__init__(message)
        self.last_delta = last_delta
        self.iterations = iterations


class CacheFormatError(AccimError):
    """An overlap cache file is corrupt or was written for another problem."""
