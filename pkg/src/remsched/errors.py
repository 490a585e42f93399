"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad input: malformed matrices, invalid actions, bad config values."""


class ConvergenceError(RuntimeError):
    """An iterative solver hit its iteration cap before reaching tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations


class CapacityError(ValueError):
    """A requested enumeration is too large to materialize."""
