"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes, so every user-facing failure should raise
one of them rather than a bare ``ValueError``.
"""


class TextDIAEError(Exception):
    """Base class for all package errors."""


class DimensionError(TextDIAEError, ValueError):
    """Shapes or image dimensions do not fit together."""


class ParseError(TextDIAEError, ValueError):
    """A byte stream (image, checkpoint, config) could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VocabularyError(TextDIAEError, ValueError):
    """A character is not representable by the font or the vocabulary."""


class ConfigError(TextDIAEError, ValueError):
    """Invalid or unknown configuration value."""


class DataError(TextDIAEError, ValueError):
    """Malformed or inconsistent training/evaluation data."""


class NumericError(TextDIAEError, ArithmeticError):
    """NaN or Inf appeared in activations, losses, or parameters."""


class MetricUndefinedError(TextDIAEError, ValueError):
    """A metric has no defined value for the given inputs."""


class CheckpointError(TextDIAEError, ValueError):
    """A checkpoint file is corrupt or does not match the model.

    ``field`` names the first offending header field or tensor.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
