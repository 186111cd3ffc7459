"""Exception hierarchy shared by all modules.

Validation problems (bad law parameters, malformed configs, dimension
mismatches) raise ``ParameterError`` or ``DomainError``; iterative solvers
that fail to reach their tolerance raise ``SolverError`` carrying the last
achieved residual. The CLI maps the first two to exit code 2 and the last
to exit code 3.
"""

from __future__ import annotations


class RcmHomLabError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(RcmHomLabError, ValueError):
    """A supplied parameter violates a documented precondition."""


class DomainError(RcmHomLabError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class SolverError(RcmHomLabError, RuntimeError):
    """An iterative solver did not meet its tolerance.

    Attributes:
        residual: last achieved residual (norm, absolute or relative as
            documented by the raising solver), or None if unavailable.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class PartialResultError(SolverError):
    """A multi-stage computation failed partway through.

    Attributes:
        completed: mapping from stage key to the results that did finish.
    """

    def __init__(self, message: str, completed: dict, residual: float | None = None):
        super().__init__(message, residual)
        self.completed = completed
