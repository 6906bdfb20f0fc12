"""Exception hierarchy shared across the package.

Two broad families matter to callers: problems with the problem statement
(SpecError and friends, CLI exit status 2) and failures of the numerics
(NumericError and friends, CLI exit status 3).
"""


class ExitLabError(Exception):
    """Base class for every error raised by this package."""


class ExpressionError(ExitLabError, ValueError):
    """Error in an arithmetic expression. ``offset`` is 1-based when known."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)


class ParseError(ExpressionError):
    pass


class EvalError(ExpressionError):
    pass


class DerivativeError(ExpressionError):
    pass


class SpecError(ExitLabError, ValueError):
    """The problem instance itself is malformed or out of supported range."""


class GridError(SpecError):
    pass


class ConfigError(SpecError):
    pass


class NumericError(ExitLabError, RuntimeError):
    """A numerical routine failed to produce a usable answer."""


class EigenError(NumericError):
    pass


class SolveError(NumericError):
    pass


class FitError(NumericError):
    pass


class SimulationError(NumericError):
    pass
