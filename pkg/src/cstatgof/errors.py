"""Exception and warning types shared across the package."""


class CstatError(Exception):
    """Base class for all package errors."""


class DomainError(CstatError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ModelViolationError(CstatError):
    """A model produced an expected count below the positivity floor."""


class FitError(CstatError):
    """The optimizer failed to reach a stationary point.

    The best iterate found is kept on ``best`` so callers can inspect or
    reuse it.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class IllConditionedError(CstatError):
    """The Fisher information is singular or numerically close to it."""


class GofError(CstatError):
    """A goodness-of-fit procedure cannot produce a valid p-value."""


class TableError(CstatError):
    """A cumulant table file is malformed or fails its checksum."""


class FloorClampWarning(UserWarning):
    """Expected counts were clamped to the positivity floor."""


class BoundaryWarning(UserWarning):
    """A fitted parameter is pinned at the edge of its allowed range."""


class BudgetWarning(UserWarning):
    """A requested computation exceeds the configured work budget."""
