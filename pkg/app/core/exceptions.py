class TccError(Exception):
    """Base class for every error raised by the package."""


class ShapeError(TccError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(TccError, FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(TccError, RuntimeError):
    """Misuse of the gradient tape (detached loss, double backward, ...)."""


class ConfigError(TccError, ValueError):
    """Invalid run configuration."""

    def __init__(self, message: str, location: str = ""):
        self.location = location
        super().__init__(f"{location}: {message}" if location else message)


class CheckpointError(TccError, ValueError):
    """Checkpoint file is malformed, corrupted or does not match the model."""


class TraceError(TccError, ValueError):
    """Context trace cannot be produced for the given model."""
