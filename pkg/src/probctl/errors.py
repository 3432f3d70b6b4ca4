"""Exception hierarchy shared by all modules."""


class ProbCtlError(Exception):
    """Base class for every error raised by this package."""


class TopologyError(ProbCtlError, ValueError):
    pass


class ParameterError(ProbCtlError, ValueError):
    pass


class CommandRangeError(ProbCtlError, ValueError):
    """A probability command fell outside [-1, 1]."""


class StateError(ProbCtlError, ValueError):
    pass


class ConsistencyError(ProbCtlError, RuntimeError):
    """An internal construction failed a property it is supposed to have."""


class EnumerationError(ProbCtlError, ValueError):
    pass


class NumericError(ProbCtlError, ArithmeticError):
    """Simulation produced non-finite values."""


class ScenarioError(ProbCtlError, ValueError):
    """Malformed scenario file. Carries an optional source position."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        if line is not None:
            where = f"line {line}" + (f", column {column}" if column is not None else "")
            message = f"{message} ({where})"
        super().__init__(message)
