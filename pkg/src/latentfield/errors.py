"""Exception types shared across the package."""


class LatentFieldError(Exception):
    """Base class for all package errors."""


class ValidationError(LatentFieldError, ValueError):
    """Input violates a shape, range or finiteness contract."""


class FormatError(LatentFieldError):
    """On-disk data is missing or malformed."""


class ConfigError(LatentFieldError, ValueError):
    """Invalid configuration value or unknown key."""


class ProjectionError(LatentFieldError, ValueError):
    """A 3D point cannot be projected (non-positive depth)."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class RankDeficiencyError(LatentFieldError, ValueError):
    """Cholesky factorisation failed; ``null_direction`` spans the degenerate subspace."""

    def __init__(self, message, null_direction=None):
        super().__init__(message)
        self.null_direction = null_direction


class NonFiniteError(LatentFieldError, FloatingPointError):
    """A loss or parameter update became NaN/inf."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class UndefinedResultError(LatentFieldError, ArithmeticError):
    """Metric is undefined for the given inputs (e.g. zero-norm direction)."""
