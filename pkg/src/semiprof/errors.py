"""Exception types shared across the package."""


class SemiprofError(Exception):
    """Base class for package errors."""


class SingularMatrixError(SemiprofError, ArithmeticError):
    """A matrix that must be inverted is numerically singular."""

    def __init__(self, block: str, detail: str = ""):
        self.block = block
        msg = f"singular matrix: {block}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ConvergenceError(SemiprofError):
    """An inner iteration failed to converge; ``best`` holds the last iterate."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


class DivergenceError(SemiprofError):
    """A NaN/Inf appeared; ``state`` is the last finite iterate."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


class DomainError(SemiprofError, ValueError):
    """Model parameters outside their admissible region."""


class ExperimentError(SemiprofError):
    """Too many replicate failures in a Monte Carlo run."""
