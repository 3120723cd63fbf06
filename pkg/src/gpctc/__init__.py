"""GP-compensated computed-torque tracking control for Euler-Lagrange systems."""

from .errors import ConditioningError, DynamicsSolveError, InfeasibleError

__version__ = "0.1.0"

__all__ = ["ConditioningError", "DynamicsSolveError", "InfeasibleError", "__version__"]
