"""Exception types shared across the package."""


class ConditioningError(ArithmeticError):
    """A matrix factorization failed even after diagonal jitter escalation."""

    def __init__(self, message, jitters=()):
        self.jitters = tuple(jitters)
        if self.jitters:
            message = f"{message} (jitter tried: {', '.join(f'{j:.3g}' for j in self.jitters)})"
        super().__init__(message)


class DynamicsSolveError(ArithmeticError):
    """The implicit acceleration equation did not converge."""

    def __init__(self, message, residual=float("nan"), step=None):
        self.residual = residual
        self.step = step
        super().__init__(message)


class InfeasibleError(ValueError):
    """A stability-bound constraint cannot be met; ``term`` names the violated one."""

    def __init__(self, message, term=""):
        self.term = term
        super().__init__(message)
