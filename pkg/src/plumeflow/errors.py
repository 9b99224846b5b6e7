"""Exception types shared across the package."""


class PlumeflowError(Exception):
    """Base class for all package errors."""


class ArgumentError(PlumeflowError, ValueError):
    """Invalid argument (shape mismatch, bad range, empty input)."""


class DimensionMismatchError(ArgumentError):
    """Fields passed together do not share grid dimensions."""


class DomainError(PlumeflowError, ValueError):
    """Problem setup is invalid (e.g. no fluid cells, obstacle outside domain)."""


class NumericError(PlumeflowError, RuntimeError):
    """Numerical breakdown: NaN iterates, non-positive pivots."""


class TransformError(PlumeflowError, ValueError):
    """A network transformation cannot be applied (budget, shape, policy)."""


class GraphError(PlumeflowError, ValueError):
    """A network graph violates its structural invariants."""

    def __init__(self, message: str, layer_index: int | None = None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class FormatError(PlumeflowError, ValueError):
    """A persisted file is malformed or has an unsupported version."""


class FitError(PlumeflowError, ValueError):
    """Regression fit is impossible (fewer than two distinct abscissae)."""


class CorrelationError(PlumeflowError, ValueError):
    """Correlation is undefined (zero variance input)."""


class StageError(PlumeflowError, RuntimeError):
    """A pipeline stage failed; carries the stage name for diagnostics."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
