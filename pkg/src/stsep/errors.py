"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent configuration."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class FormatError(ValueError):
    """Malformed binary container or checkpoint."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
