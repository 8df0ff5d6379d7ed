"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or precondition violation (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Numerical failure in a solver or factorization (CLI exit code 1)."""


class ConvergenceError(NumericalError):
    """Iterative solver exhausted its iteration cap.

    Carries the best residuals seen so the caller can diagnose how far the
    solve got.
    """

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals
