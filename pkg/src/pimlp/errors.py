"""Exception types shared across the package."""


class PimlpError(Exception):
    """Base class for all package errors."""


class DimensionError(PimlpError, ValueError):
    """Array shapes do not agree."""


class LengthError(PimlpError, ValueError):
    """A signal has the wrong number of samples for the requested operation."""


class ConfigError(PimlpError, ValueError):
    """Invalid hyperparameter or model configuration."""


class DataError(PimlpError, ValueError):
    """Dataset contents unsuitable for the requested operation (e.g. missing labels)."""


class FormatError(PimlpError, ValueError):
    """Malformed on-disk file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NonFiniteGradientError(PimlpError, FloatingPointError):
    """A gradient tensor contains NaN or Inf."""
