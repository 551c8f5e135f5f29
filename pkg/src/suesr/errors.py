"""Exception hierarchy, one subclass per failure family."""


class SuesrError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(SuesrError, ValueError):
    """A configuration value or structure is invalid."""


class InputError(SuesrError, ValueError):
    """A runtime input violates a precondition (range, finiteness, emptiness)."""


class ShapeError(InputError):
    """Array shapes disagree with each other or with the expected layout."""


class SizeError(InputError):
    """A spatial size is outside the supported range (too small, not divisible)."""


class BackendError(SuesrError, RuntimeError):
    """A pluggable backend is unavailable or failed to load."""


class DataError(SuesrError, RuntimeError):
    """Dataset ingestion failed (missing directory, empty class, bad manifest)."""


class CheckpointError(SuesrError, RuntimeError):
    """A checkpoint is corrupt or structurally invalid."""


class IncompatibilityError(CheckpointError):
    """A checkpoint does not match the model architecture it is being applied to."""


class NumericError(SuesrError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""
