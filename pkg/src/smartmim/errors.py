"""Exception types shared across the package."""


class SmartError(Exception):
    """Base class for all package errors."""


class ValidationError(SmartError, ValueError):
    """An argument violates a documented precondition or range."""


class ShapeError(SmartError, ValueError):
    """Array or grid geometry is incompatible with the requested operation."""


class FormatError(SmartError, IOError):
    """A file could not be parsed as the expected on-disk format."""


class PlacementError(SmartError, RuntimeError):
    """Phantom structures could not be placed without overlap."""


class NumericError(SmartError, FloatingPointError):
    """Non-finite values appeared during a forward pass or loss evaluation."""


class CorruptCheckpointError(SmartError, IOError):
    """Checkpoint bytes are truncated or fail their checksum."""


class ConfigError(SmartError, ValueError):
    """Configuration text or override is unknown, mistyped or out of range."""
