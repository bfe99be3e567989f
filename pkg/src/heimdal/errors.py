"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, data and format
problems exit 2.
"""


class HeimdalError(Exception):
    """Base class for all toolkit errors."""


class FormatError(HeimdalError):
    """A file (WAV, feature, weight, TSV) is malformed or truncated."""


class UnsupportedError(FormatError):
    """A file is well-formed but uses an encoding we do not handle."""


class PreconditionError(HeimdalError):
    """An argument violates a documented precondition."""


class ShapeError(HeimdalError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigError(HeimdalError):
    """A model or training configuration is invalid."""


class InputTooShortError(HeimdalError):
    """The input has fewer frames than the model's receptive field."""

    def __init__(self, frames: int, receptive_field: int):
        self.frames = frames
        self.receptive_field = receptive_field
        super().__init__(
            f"input has {frames} frames but the model needs at least "
            f"{receptive_field} (its receptive field)"
        )
