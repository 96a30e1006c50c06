"""Exception types raised across the package."""


class PanelWaldError(Exception):
    """Base class for all package errors."""


class ModelSyntaxError(PanelWaldError, ValueError):
    """Malformed statement in a model description."""

    def __init__(self, line, col, message):
        self.line = line
        self.col = col
        self.message = message
        super().__init__(f"line {line}, col {col}: {message}")


class DuplicateParameter(PanelWaldError, ValueError):
    def __init__(self, key, line=None):
        self.key = key
        self.line = line
        lhs, op, rhs = key
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"parameter '{lhs} {op} {rhs}' specified twice{where}")


class SingularSystem(PanelWaldError, ArithmeticError):
    """(I - A) is not invertible at the evaluated parameter vector."""


class NonFiniteParameter(PanelWaldError, ValueError):
    pass


class NotPositiveDefinite(PanelWaldError, ArithmeticError):
    def __init__(self, which="Sigma", message=None):
        self.which = which
        super().__init__(message or f"{which} is not positive definite")


class UnstableProcess(PanelWaldError, ValueError):
    """Spectral radius of the lag matrix is >= 1."""


class StartValueFailure(PanelWaldError, RuntimeError):
    pass


class LabelMismatch(PanelWaldError, KeyError):
    pass


class UnknownScenario(PanelWaldError, KeyError):
    pass


class DataError(PanelWaldError, ValueError):
    """Problems with user supplied data (missing columns, rank, ...)."""


class MissingColumn(DataError):
    pass


class NonPdSampleCovariance(DataError):
    pass


class SimulationAborted(PanelWaldError, RuntimeError):
    """Too many replications failed for the summary to be meaningful."""
