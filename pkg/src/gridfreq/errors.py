"""Exception hierarchy shared across the toolkit."""


class GridFreqError(Exception):
    """Base class for all toolkit errors."""


class CaseParseError(GridFreqError):
    """Raised when a case file cannot be parsed (syntax, arity, missing matrix)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CaseModelError(GridFreqError):
    """Raised when parsed data violates model requirements (duplicate ids,
    zero-impedance branch, islands, no generators)."""


class ContingencyError(GridFreqError):
    """Raised for invalid contingency requests (unknown generator, tripping
    the last in-service unit)."""


class DegenerateCurveError(GridFreqError):
    """Raised when a droop characteristic cannot be constructed (operating
    point outside its power limits)."""


class SingularSystemError(GridFreqError):
    """Raised when a linear system is structurally or numerically singular.

    ``row`` is the offending matrix row when known (-1 otherwise); callers
    map it back to a bus or constraint for diagnostics.
    """

    def __init__(self, message, row=-1):
        super().__init__(message)
        self.row = row


class SingularInjectionError(GridFreqError):
    """Raised when an iterate drives a bus voltage magnitude below the
    numeric floor, so the constant-power injection current blows up."""

    def __init__(self, bus):
        super().__init__(f"bus voltage magnitude below 1e-6 at bus index {bus}")
        self.bus = bus


class ConvergenceError(GridFreqError):
    """Raised when an iterative solve exhausts its budget.

    Carries the last residual norm and iteration count for reporting.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
