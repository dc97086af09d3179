"""Exception types raised across the package."""


class DimensionError(ValueError):
    """An array does not have the shape the ensemble or instance expects."""


class ConvergenceError(RuntimeError):
    """An iterative routine hit its iteration cap.

    The best estimate available at the time of failure is kept on ``last``
    so callers can decide whether it is good enough.
    """

    def __init__(self, message, last=None, iterations=None):
        super().__init__(message)
        self.last = last
        self.iterations = iterations


class SolverError(RuntimeError):
    """Gradient descent could not make progress (stepsize underflow, NaN)."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration
