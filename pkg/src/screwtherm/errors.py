"""Exception hierarchy shared by all screwtherm modules."""


class ScrewthermError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(ScrewthermError, ValueError):
    """Invalid geometric input or construction (bad knot vector, orientation, ...)."""


class DomainError(GeometryError):
    """Parameter outside the valid parameter domain of a spline object."""


class FitError(GeometryError):
    """Curve fitting could not reach the requested tolerance within budget."""


class AssemblyError(ScrewthermError, RuntimeError):
    """Discretization or assembly failure (singular Jacobian, bad space, ...)."""


class SolverError(ScrewthermError, RuntimeError):
    """Linear solver failure (not SPD, breakdown, residual contract violated)."""


class ConfigError(ScrewthermError, ValueError):
    """Invalid or inconsistent pipeline configuration."""
