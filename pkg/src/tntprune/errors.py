"""Exception hierarchy shared by every module."""


class TNTError(Exception):
    """Base class for all errors raised by tntprune."""


class ShapeError(TNTError, ValueError):
    pass


class DomainError(TNTError, ValueError):
    pass


class UsageError(TNTError, RuntimeError):
    pass


class ConfigError(TNTError, ValueError):
    pass


class FormatError(TNTError, ValueError):
    """Malformed container file. ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(TNTError, RuntimeError):
    pass


class ScheduleError(TNTError, ValueError):
    pass


class UnsupportedArchitectureError(TNTError, ValueError):
    pass


class DataError(TNTError, ValueError):
    """Missing or inconsistent input data (checkpoints, datasets, history samples)."""
