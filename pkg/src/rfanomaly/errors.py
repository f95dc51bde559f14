"""Exception types shared across the package."""


class InvalidArgument(ValueError):
    """An argument violates an operation's precondition."""


class DatasetError(Exception):
    """A frame dataset on disk is missing, malformed or corrupt."""


class DatasetNotFound(DatasetError, FileNotFoundError):
    pass


class ChecksumMismatch(DatasetError):
    pass


class CheckpointError(Exception):
    """A model checkpoint could not be read back."""


class DegenerateCurve(ValueError):
    """The score series cannot produce a ROC curve (e.g. constant scores)."""


class ConfigError(Exception):
    """Invalid run configuration. ``line`` is 1-based when known."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NumericalFailure(RuntimeError):
    """NaN or Inf appeared in a computation that must stay finite."""
