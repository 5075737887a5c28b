"""Exceptions raised by MoLRG Lab.

Every error carries the process exit code the command line reports for it:
2 invalid arguments, 3 io-error, 4 numerical failure.
"""

from typing import Optional


class MolrgError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class InvalidArgumentError(MolrgError, ValueError):
    exit_code = 2


class InfeasibleDimsError(InvalidArgumentError):
    """Subspace dimensions do not fit in the ambient space."""


class InvalidParamsError(InvalidArgumentError):
    """Denoiser bases violate their orthonormality constraint."""


class InvalidIndexError(InvalidArgumentError):
    """Singular-vector index beyond the numerical rank."""


class UnsupportedScheduleError(InvalidArgumentError):
    """Closed form requested for a schedule it does not cover."""


class StorageError(MolrgError, OSError):
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path

    def __str__(self):
        if self.path:
            return f"{self.args[0]}: {self.path}"
        return self.args[0]


class NumericalError(MolrgError, ArithmeticError):
    exit_code = 4


class DegenerateStateError(NumericalError):
    """Noise level is zero where a positive one is required."""


class UndefinedScoreError(NumericalError):
    """GL score denominator vanished."""


class TrainingDivergedError(NumericalError):

    def __init__(self, iteration: int, message: str = "training diverged"):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class SolverDivergedError(NumericalError):

    def __init__(self, step: int, message: str = "sampler diverged"):
        super().__init__(f"{message} at step {step}")
        self.step = step
