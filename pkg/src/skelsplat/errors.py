"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A numerical routine produced an unusable result (non-finite, out of tolerance)."""

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class ConvergenceError(NumericError):
    """An iterative numerical routine failed to reach its tolerance."""


class DegenerateEdgeError(ValueError):
    """A skeleton edge has numerically coincident endpoints."""


class DegenerateConfigurationError(ValueError):
    """The inputs admit no well-posed solution."""
