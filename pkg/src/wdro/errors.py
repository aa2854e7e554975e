"""Exception types shared across the package."""


class WdroError(Exception):
    """Base class for all library errors."""


class ValidationError(WdroError, ValueError):
    """Bad input or a violated precondition (CLI exit status 2)."""


class NumericalError(WdroError, RuntimeError):
    """A numerical routine failed to deliver its contract (CLI exit status 3)."""


class ConvergenceError(NumericalError):
    """An iterative solver stopped before reaching its tolerance.

    ``best`` holds the best iterate found and ``residual`` its residual.
    """

    def __init__(self, message, best=None, residual=None, trace=None):
        super().__init__(message)
        self.best = best
        self.residual = residual
        self.trace = trace


class SingularHessianError(NumericalError):
    def __init__(self, message, eigenvalues=None):
        super().__init__(message)
        self.eigenvalues = eigenvalues


class RadiusOrderMismatch(ValidationError):
    """The inner supremum of the dual problem is unbounded."""


class AlternativeConditionError(ValidationError):
    def __init__(self, message, atoms=None):
        super().__init__(message)
        self.atoms = atoms


class DegenerateConstraintError(ValidationError):
    pass
