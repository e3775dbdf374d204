"""Exception types shared across the package."""


class SueError(Exception):
    """Base class for all errors raised by this package."""


class FormatError(SueError):
    """A file or byte stream does not conform to its declared format."""


class ConfigError(SueError):
    """Invalid configuration or parameters outside an operation's domain."""


class NumericalError(SueError):
    """A numerical routine failed (non-convergence, degeneracy, NaN)."""


class StageError(SueError):
    """A pipeline stage failed; message carries the stage name."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause
