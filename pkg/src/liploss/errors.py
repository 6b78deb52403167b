"""Exception types shared across the package."""


class LipLossError(Exception):
    """Base class for all errors raised by liploss."""


class ShapeError(LipLossError, ValueError):
    """Operands have incompatible or unsupported shapes."""


class ConfigError(LipLossError, ValueError):
    """A configuration value is out of its allowed range."""


class UsageError(LipLossError, RuntimeError):
    """An API was called in a way its contract does not allow."""


class NonFiniteError(LipLossError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


class TrainingFault(LipLossError, RuntimeError):
    """Training cannot continue (non-finite loss or gradient)."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class FormatError(LipLossError, ValueError):
    """A file does not follow the expected on-disk format."""
