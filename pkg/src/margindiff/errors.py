"""Exception hierarchy shared by every module."""


class MarginDiffError(Exception):
    pass


class ConfigError(MarginDiffError, ValueError):
    """Invalid hyperparameter or architecture configuration."""


class ArgumentError(MarginDiffError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class UsageError(MarginDiffError, RuntimeError):
    """API used out of order, e.g. backpropagating through a stale tape."""


class DataError(MarginDiffError, ValueError):
    """Input data unusable for the requested operation, e.g. a dataset that
    does not fit the checkpoint's architecture."""


class FormatError(DataError):
    """Malformed ``.dds`` or ``.dcp`` file.

    ``offset`` is the byte position where parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(MarginDiffError, RuntimeError):
    """Training diverged; ``diagnostics`` holds batch statistics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
