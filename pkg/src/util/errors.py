from typing import Optional


class GramNetError(Exception):
    """Base class for every error raised by the gramnet code base."""


class NumericalFailure(GramNetError):
    """
    A numerical breakdown during a forward or backward pass.
    The forward pass attaches the index of the failing layer before re-raising.
    """
    def __init__(self, message: str, layer: Optional[int] = None):
        super().__init__(message)
        self.layer = layer

    def with_layer(self, layer: int) -> "NumericalFailure":
        if self.layer is None:
            self.layer = layer
        return self

    def __str__(self) -> str:
        base = super().__str__()
        return base if self.layer is None else f"{base} (layer {self.layer})"


class DecompositionFailure(NumericalFailure):
    def __init__(self, message: str, pivot: int, layer: Optional[int] = None):
        super().__init__(message, layer)
        self.pivot = pivot


class ConvergenceFailure(NumericalFailure):
    pass


class NonPositiveDiagonal(NumericalFailure, ValueError):
    pass


class NonFiniteInput(NumericalFailure, ValueError):
    pass


class NonFiniteGradient(NumericalFailure):
    def __init__(self, parameter: str, layer: Optional[int] = None):
        super().__init__(f"Non-finite gradient in parameter '{parameter}'", layer)
        self.parameter = parameter


class ShapeMismatch(GramNetError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class PrecisionMismatch(GramNetError, TypeError):
    pass


class ConfigError(GramNetError, ValueError):
    pass


class FormatError(GramNetError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ChecksumMismatch(FormatError):
    pass
