"""Exception hierarchy shared across the package."""


class WaveformerError(Exception):
    """Base class for all package errors."""


class DimensionError(WaveformerError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(WaveformerError, ValueError):
    """A precondition of an operation does not hold."""


class NonFiniteError(WaveformerError, FloatingPointError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class ConfigError(WaveformerError, ValueError):
    """A model or run configuration violates its invariants."""


class CheckpointError(WaveformerError):
    """A checkpoint file is malformed or does not match the requested model."""


class FormatError(WaveformerError):
    """A WAV file could not be decoded."""


class ManifestError(WaveformerError):
    """A manifest CSV could not be parsed."""


class TrainingError(WaveformerError):
    """Training had to abort (non-finite loss or gradient)."""
