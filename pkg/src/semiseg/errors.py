"""Exception types shared across the package."""


class SemisegError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SemisegError, ValueError):
    """A config object or hyper-parameter is out of its legal range."""


class ShapeError(SemisegError, ValueError):
    """Array shapes are incompatible with an operation's contract."""


class DataError(SemisegError, ValueError):
    """Dataset contents violate a validation rule (ranges, monotonicity, ...)."""


class TrainingDivergedError(SemisegError, RuntimeError):
    """Training produced a non-finite loss and was aborted."""
