"""Exception types shared across the package."""


class NclError(Exception):
    """Base class for all package errors."""


class UsageError(NclError):
    """Invalid arguments, dimensions, configuration, or constraint violations.

    Maps to CLI exit code 2.
    """


class StepSizeError(UsageError):
    """Step size violates the stability condition mu >= sigma2 / 2."""


class DegenerateDataError(UsageError):
    """Sample set too small or collinear to determine a unique fit."""


class NumericDivergenceError(NclError):
    """A sampler state left the numerically safe region.

    Carries the offending state and, when raised from a chain, the step
    index at which it occurred. Maps to CLI exit code 3.
    """

    def __init__(self, message, state=None, step=None):
        super().__init__(message)
        self.state = state
        self.step = step


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
