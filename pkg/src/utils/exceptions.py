"""Exception hierarchy for the gang-of-bandits harness."""

from typing import Optional, Sequence


class GobError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(GobError, ValueError):
    """Invalid experiment configuration or CLI override."""


class DimensionError(GobError, ValueError):
    """A vector or matrix does not have the shape the operation expects."""


class GraphError(GobError, ValueError):
    """Invalid graph input or an unreachable generator target."""


class NotPositiveDefiniteError(GraphError):
    """Cholesky factorization hit a non-positive pivot."""

    def __init__(self, pivot: int, value: float):
        self.pivot = pivot
        self.value = value
        super().__init__(
            f"matrix is not positive definite: pivot for node {pivot} is {value:.3e}"
        )


class SolverError(GobError, ArithmeticError):
    """Conjugate gradient produced non-finite values."""


class GraphLearningError(GobError):
    """Graphical lasso or its penalty tuning failed."""

    def __init__(self, message: str, densities: Optional[Sequence[float]] = None):
        self.densities = list(densities) if densities is not None else []
        if self.densities:
            message = f"{message} (achieved densities: {', '.join(f'{x:.4f}' for x in self.densities)})"
        super().__init__(message)


class DatasetError(GobError):
    """A dataset file is missing or malformed."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")
