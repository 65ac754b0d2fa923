"""Exception types shared across the package.

The CLI maps ``DataError`` to exit code 1 (bad input) and ``NumericError``
subclasses to exit code 2 (numerical failure).
"""


class DataError(ValueError):
    """Malformed or unusable input data (missing columns, too few clusters, ...)."""


class NumericError(RuntimeError):
    """A numerical procedure failed (singular system, non-convergence, ...)."""


class SingularMatrixError(NumericError):
    """A linear system that must be solvable is (numerically) singular."""


class ConvergenceError(NumericError):
    """An iterative fitter did not converge within its iteration budget.

    The best iterate found so far is attached as ``best_state`` when available.
    """

    def __init__(self, message, best_state=None):
        super().__init__(message)
        self.best_state = best_state
