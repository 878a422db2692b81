"""Exception types shared across gridfuse."""


class GridfuseError(Exception):
    """Base class for all library errors."""


class FormatError(GridfuseError):
    """Bad magic, version, or malformed binary container."""


class TruncationError(FormatError):
    def __init__(self, what: str, expected: int, actual: int):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


class ValidationError(GridfuseError, ValueError):
    """A data-model invariant does not hold."""


class AlignmentError(GridfuseError, ValueError):
    """Axes, masks, or shapes of two objects do not line up."""


class ShapeError(GridfuseError, ValueError):
    pass


class ConfigError(GridfuseError, ValueError):
    """Invalid configuration value or file."""


class ExtrapolationError(GridfuseError, ValueError):
    pass


class TrainingError(GridfuseError, RuntimeError):
    """Training diverged (non-finite loss or gradient)."""


class ModeError(GridfuseError, ValueError):
    """Requested attribution mode cannot handle the query."""
