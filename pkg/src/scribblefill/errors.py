"""Exception types shared across the package."""


class ScribblefillError(Exception):
    """Base class for all package errors."""


class ValidationError(ScribblefillError, ValueError):
    """Bad input: malformed file, out-of-range parameter, dimension mismatch."""


class SolverError(ScribblefillError, RuntimeError):
    """A linear solve failed to converge or the system is unusable.

    May carry a partial `report` attribute with per-class solver stats
    gathered before the failure.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
