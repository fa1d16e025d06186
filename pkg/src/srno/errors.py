"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""

    def __init__(self, key, message):
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckpointError(IOError):
    """Checkpoint file is malformed, truncated or inconsistent with its config."""
