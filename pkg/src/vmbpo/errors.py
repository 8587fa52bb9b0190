"""Exception hierarchy shared by the solvers, learners and the command line."""


class VmbpoError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(VmbpoError, ValueError):
    """A configuration value is missing, malformed or out of range."""


class SupportError(VmbpoError, ValueError):
    """A distribution puts mass where its reference distribution has none."""


class NotTransientError(VmbpoError):
    """Some state cannot reach a terminal state, so the stopping time is not finite."""


class EnumerationBudgetError(VmbpoError):
    """Trajectory enumeration would exceed the allowed number of paths."""


class ConvergenceError(VmbpoError):
    """An iterative solver hit its sweep cap before reaching tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericalAbort(VmbpoError):
    """A learning update produced a non-finite loss or parameter."""

    def __init__(self, message, step=None):
        if step is not None:
            message = f"{message} (update round {step})"
        super().__init__(message)
        self.step = step
