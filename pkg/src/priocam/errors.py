"""Shared exception types."""


class ConfigurationError(ValueError):
    """A configuration value violates a documented invariant."""


class DomainError(ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ShapeError(ValueError):
    """Tensor shapes do not conform."""


class CoderError(RuntimeError):
    """Entropy coder invariant violated during encoding."""


class DecodeError(CoderError):
    """Bitstream could not be decoded.

    Carries ``position``, the byte offset at which the problem was detected.
    """

    def __init__(self, message: str, position: int = 0):
        super().__init__(f"{message} (at byte {position})")
        self.position = position


class TrainingError(RuntimeError):
    """Non-finite loss or gradient encountered during optimization."""
