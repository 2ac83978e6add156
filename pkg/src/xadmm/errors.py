"""Exception types shared across the solver stack."""


class SolverError(Exception):
    """Base class for all solver-raised errors."""


class NonFiniteValue(SolverError):
    """An objective or gradient evaluation returned NaN or infinity."""


class LineSearchFailure(SolverError):
    """No step with measurable sufficient decrease was found.

    Raised only when a decrease larger than float resolution was requested
    and still not achieved within the halving budget, which points at an
    inconsistent gradient or severe ill-conditioning.  Sub-resolution
    stagnation near a minimizer is not an error and terminates the solve
    gracefully instead.
    """


class MaxItersExceeded(SolverError):
    """An iteration budget was exhausted where that is a hard failure.

    Carries ``level`` ("outer", "middle" or "inner") for the nested-loop
    baseline so callers can tell which loop ran out.
    """

    def __init__(self, message, level=None):
        super().__init__(message)
        self.level = level


class WorkerFailure(SolverError):
    """A worker aborted the current round."""

    def __init__(self, worker_id, cause):
        super().__init__(f"worker {worker_id} failed: {cause!r}")
        self.worker_id = worker_id
        self.cause = cause


class NoConvergence(SolverError):
    """A reference solve did not reach the requested accuracy."""


class InvalidConfig(SolverError):
    """A problem generator or CLI configuration is unusable."""
