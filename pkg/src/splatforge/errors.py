"""Exception hierarchy shared across the package."""


class SplatForgeError(Exception):
    """Base class for all package errors."""


class FormatError(SplatForgeError):
    """Malformed or unsupported file content."""


class ValidationError(SplatForgeError):
    """Data violates a documented invariant (NaN fields, bad ranges, ...)."""


class ParameterError(SplatForgeError):
    """An argument is outside its documented domain."""


class StateError(SplatForgeError):
    """Operation called on an object in the wrong state."""


class DimensionError(ParameterError):
    """Shape or dimensionality mismatch."""


class UnsupportedTransformError(ParameterError):
    """Transform outside the rigid + uniform-scale family."""


class SamplerBudgetError(SplatForgeError):
    """Sampled state grew past the configured cell budget."""

    def __init__(self, message: str, cell_count: int, budget: int):
        super().__init__(message)
        self.cell_count = cell_count
        self.budget = budget


class TrainingError(SplatForgeError):
    """Training aborted; carries the last good checkpoint when available."""

    def __init__(self, message: str, checkpoint: bytes | None = None, iteration: int = 0):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.iteration = iteration
