"""Exception types shared across the package."""


class LipPassError(Exception):
    """Base class for all package errors."""


class ManifestError(LipPassError, ValueError):
    """A manifest line could not be parsed or violates a record invariant."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class DuplicateKeyError(ManifestError):
    """Two manifest records share the same (speaker, word, take) key."""


class SplitError(LipPassError, ValueError):
    """The split protocol cannot be applied to the given records."""


class FrameDecodeError(LipPassError, ValueError):
    """A frame could not be decoded into an RGB image."""


class FormatError(LipPassError, ValueError):
    """A binary file does not follow the expected layout."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    def __init__(self, path, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(
            f"{path}: truncated payload, expected {expected} bytes, got {actual}"
        )


class ShapeMismatchError(LipPassError, ValueError):
    """Array or file dimensions disagree with the configured geometry."""


class CacheMissError(LipPassError, KeyError):
    """No cached embedding exists for the requested utterance."""

    def __str__(self):
        return str(self.args[0]) if self.args else "cache miss"


class UndefinedMetricError(LipPassError, ZeroDivisionError):
    """A metric's denominator is zero for the given confusion counts."""


class NonFiniteError(LipPassError, FloatingPointError):
    """A loss or gradient became NaN or infinite."""


class TrainingError(LipPassError, RuntimeError):
    pass
