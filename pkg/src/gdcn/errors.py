"""Exception types shared across the package."""


class MalformedInputError(ValueError):
    """Raised when externally supplied data (files, edge lists) is invalid."""


class ContractViolation(ValueError):
    """Raised when an internal API is called with arguments that break its contract."""


class DivergenceError(RuntimeError):
    """Raised when training produces non-finite losses for several consecutive epochs."""


class EstimatorFailure(RuntimeError):
    """Raised when a gradient estimator receives a non-finite loss evaluation."""
