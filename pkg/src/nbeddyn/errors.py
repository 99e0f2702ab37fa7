"""Exception types shared across the package."""


class NbedDynError(Exception):
    """Base class for all package errors."""


class DimensionError(NbedDynError, ValueError):
    pass


class IntegrationDivergedError(NbedDynError, FloatingPointError):
    """Raised when an integration produces non-finite states.

    ``step`` is the index of the offending step (substep for a single RK4 call,
    row for a trajectory).
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DivergedError(NbedDynError, FloatingPointError):
    """Raised when an objective becomes non-finite or exceeds its guard."""

    def __init__(self, message: str, iteration: int | None = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class DataError(NbedDynError, ValueError):
    """Input data unusable: too short, degenerate, fully masked, ..."""


class SchemaError(NbedDynError, ValueError):
    """Malformed or unsupported persisted document."""
