"""Exception types shared across the package.

The CLI maps these onto exit codes: ``FormatError`` -> 2, ``ConfigError`` -> 3.
"""


class KpshiftError(Exception):
    pass


class ShapeError(KpshiftError, ValueError):
    """Extents, ranks or bounds do not fit the operation."""


class FormatError(KpshiftError):
    """Malformed KPST file or checkpoint directory."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(KpshiftError, ValueError):
    """A configuration value violates its invariant."""


class NeedTwoFramesError(ConfigError):
    def __init__(self, frames):
        super().__init__(f"need at least 2 frames, got T={frames}")
        self.frames = frames


class DivergenceError(KpshiftError, RuntimeError):
    """Training produced a non-finite loss."""
