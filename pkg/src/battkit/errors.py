"""Exception types raised across battkit."""


class BattkitError(Exception):
    """Base class for all battkit errors."""


class InvalidGridError(BattkitError, ValueError):
    pass


class DomainError(BattkitError, ValueError):
    pass


class NumericalFailure(BattkitError, ArithmeticError):
    """A linear solve or eigen-decomposition could not be carried out."""


class IntegrationFailure(BattkitError, RuntimeError):
    """Time integration produced non-finite values.

    The offending step index is kept in ``step``.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(BattkitError, ValueError):
    """Malformed table, CSV or parameter file."""


class AssemblyError(BattkitError, ValueError):
    pass


class InputError(BattkitError, ValueError):
    pass


class DesignFailure(BattkitError, RuntimeError):
    """The observer LMI could not be made feasible.

    ``best_margin`` holds the best (smallest) normalized max eigenvalue found.
    """

    def __init__(self, message, best_margin=None):
        super().__init__(message)
        self.best_margin = best_margin
