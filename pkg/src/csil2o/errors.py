"""Exception types shared across the package."""


class CsiL2OError(Exception):
    """Base class for all package errors."""


class DimensionError(CsiL2OError, ValueError):
    """Operand shapes do not agree."""


class ContractError(CsiL2OError, ValueError):
    """A precondition of an operation was violated."""


class FormatError(CsiL2OError, ValueError):
    """A binary file has a bad magic, version, or is truncated."""


class NonConvergenceError(CsiL2OError, RuntimeError):
    """An iterative method hit its iteration cap.

    The last iterate and its residual are attached so callers can still
    inspect or use them.
    """

    def __init__(self, message, iterate=None, residual=None):
        super().__init__(message)
        self.iterate = iterate
        self.residual = residual


class NumericalError(CsiL2OError, FloatingPointError):
    """NaN or inf appeared where a finite value was required."""
