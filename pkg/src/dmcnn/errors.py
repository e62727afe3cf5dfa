"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, or a corpus/config combination that cannot be used."""


class ImageDecodeError(OSError):
    """An image file could not be read or decoded."""


class CheckpointError(ValueError):
    """A checkpoint is corrupt or does not match the requested architecture."""


class NumericFault(FloatingPointError):
    """A forward operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a gradient tape (non-scalar loss, replayed tape, ...)."""
