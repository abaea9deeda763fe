"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside the range an operation accepts."""


class InvariantError(RuntimeError):
    """An internal consistency check failed."""
