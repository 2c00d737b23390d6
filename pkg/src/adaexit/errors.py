"""Shared exception types."""


class ConfigError(ValueError):
    """A configuration value or combination is unusable."""


class FormatError(ValueError):
    """A serialized artifact is malformed. Carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DependencyError(RuntimeError):
    """A pipeline stage is missing an artifact a previous stage should have produced."""
