"""Exception types shared across the package."""


class DataError(ValueError):
    """Invalid input data or arguments (bad CSV rows, out-of-domain times, ...)."""


class NumericalError(RuntimeError):
    """A numerical procedure could not produce a result (singular systems, failed factorizations)."""
