"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes, so every error raised on a user-facing
path should derive from one of the classes below.
"""


class GridViTError(Exception):
    """Base class for all package errors."""


class ValidationError(GridViTError, ValueError):
    """Invalid argument values or malformed records."""


class DimensionError(ValidationError):
    """Operands with incompatible shapes."""


class ConfigError(ValidationError):
    """Model or run configuration inconsistent with the data or itself."""


class InsufficientDepthError(ValidationError):
    """A volume has fewer slices than the window needs."""


class NonFiniteGradientError(GridViTError, FloatingPointError):
    """An optimizer update was rejected because a gradient held NaN/Inf."""


class TrainingAbort(GridViTError):
    """Training stopped on a non-finite loss."""


class EvaluationError(GridViTError):
    """Inference or metric aggregation failed."""


# --- file formats -----------------------------------------------------------


class FormatError(GridViTError):
    """Base class for on-disk format violations."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class NonFiniteDataError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    """Stored tensor shapes contradict the stored configuration."""
