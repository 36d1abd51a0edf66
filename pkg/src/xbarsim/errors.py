"""Exception types shared across the package."""


class ValidationError(ValueError):
    """A contract violation: bad dimensions, out-of-range values, bad files."""


class SolverError(RuntimeError):
    """The linear system could not be solved to the requested tolerance.

    Carries the achieved residual when one is available.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual
