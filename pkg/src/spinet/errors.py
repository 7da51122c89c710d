"""Exception hierarchy shared by all spinet modules."""


class SpinError(Exception):
    """Base class for every error raised by spinet."""


class DimensionMismatch(SpinError, ValueError):
    pass


class NotPositiveDefinite(SpinError, ArithmeticError):
    def __init__(self, message, jitter=None, step=None, condition=None):
        super().__init__(message)
        self.jitter = jitter
        self.step = step
        self.condition = condition


class SingularDiagonal(SpinError, ArithmeticError):
    pass


class NonConvergence(SpinError, ArithmeticError):
    def __init__(self, message, iterations=None, residual=None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class DomainViolation(SpinError, ValueError):
    pass


class IndexOutOfRange(SpinError, IndexError):
    pass


class ConfigError(SpinError, ValueError):
    pass


class PlacementFailure(SpinError, RuntimeError):
    pass


class InsufficientFrames(SpinError, ValueError):
    pass


class FormatVersionMismatch(SpinError, ValueError):
    pass


class CorruptChecksum(SpinError, ValueError):
    pass


class SpinIOError(SpinError, OSError):
    pass
