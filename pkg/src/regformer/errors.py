"""Exception types shared across the package."""


class RegformerError(Exception):
    """Base class for all package errors."""


class ConfigurationError(RegformerError, ValueError):
    """Invalid configuration or structurally impossible input."""


class ShapeError(RegformerError, ValueError):
    """Operand shapes are incompatible."""


class EmptyLossError(RegformerError, ValueError):
    """Every position of a loss was masked out."""


class NonFiniteError(RegformerError, FloatingPointError):
    """A NaN or infinity showed up where a finite value is required."""


class UnsupportedVariantError(RegformerError, ValueError):
    """The requested analysis does not apply to this model variant."""


class CheckpointError(RegformerError, ValueError):
    """Checkpoint file is malformed, of an unknown version, or mismatched."""


class LengthError(RegformerError, ValueError):
    """A packed sequence exceeds the model's position budget."""
