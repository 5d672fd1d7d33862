"""Exception types shared across the package."""


class VibfuseError(Exception):
    """Base class for all package errors."""


class ShapeError(VibfuseError):
    """Array shapes incompatible with the requested operation."""


class NumericError(VibfuseError):
    """A computation produced NaN or Inf."""


class ConfigError(VibfuseError):
    """Invalid configuration value or unknown config key."""


class DataFormatError(VibfuseError):
    """Malformed or incompatible on-disk file."""
