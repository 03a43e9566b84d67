"""Exception hierarchy shared by every mslm module."""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from collections.abc import Sequence


class MslmError(Exception):
    """Base class for all errors raised by mslm."""


class ShapeError(MslmError, ValueError):
    """An operation received inputs whose shapes do not conform."""

    def __init__(self, op: str, shapes: Sequence[tuple[int, ...]], detail: str = "") -> None:
        """Record the op name and the offending shapes.

        Args:
            op: Name of the operation that rejected its inputs
            shapes: Shapes of the inputs, in argument order
            detail: Optional extra explanation
        """
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        message = f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class NonFiniteError(MslmError, ArithmeticError):
    """A forward or backward pass produced NaN or infinity."""

    def __init__(self, op: str, where: str = "output") -> None:
        """Record the op that produced the non-finite value."""
        self.op = op
        super().__init__(f"{op}: non-finite values in {where}")


class GradientError(MslmError, ValueError):
    """Backward was requested on something that is not a scalar loss."""


class MaskError(MslmError, ValueError):
    """Attention-mask construction received unrepresentable parameters."""


class DivisibilityError(MslmError, ValueError):
    """A sequence length is not divisible by a scale factor where it must be."""

    def __init__(self, length: int, factor: int, what: str = "sequence") -> None:
        """Record the length and the factor it failed to divide by."""
        self.length = length
        self.factor = factor
        super().__init__(f"{what} length {length} is not divisible by {factor}")


class ConfigError(MslmError, ValueError):
    """A run configuration is invalid; ``key`` names the offending dotted key."""

    def __init__(self, key: str, message: str) -> None:
        """Record the dotted config key and the reason."""
        self.key = key
        super().__init__(f"{key}: {message}")


class CheckpointError(MslmError):
    """A checkpoint file could not be read or written."""


class CheckpointVersionError(CheckpointError):
    """A checkpoint was written by an incompatible format version."""

    def __init__(self, found: int, expected: int) -> None:
        """Record both versions."""
        self.found = found
        self.expected = expected
        super().__init__(
            f"checkpoint format version {found} is not supported (expected {expected})"
        )


class ScaleError(MslmError, ValueError):
    """A model was asked for a scale it does not have."""

    def __init__(self, scale: int, available: Sequence[int]) -> None:
        """Record the requested scale and the scales the model exposes."""
        self.scale = scale
        self.available = tuple(available)
        super().__init__(f"scale {scale} is not one of this model's scales {self.available}")


class CorpusError(MslmError, ValueError):
    """A corpus is empty or too short for the requested operation."""
