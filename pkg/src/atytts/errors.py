class InvalidInput(ValueError):
    """Raised when an operation receives data it cannot process."""


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""
