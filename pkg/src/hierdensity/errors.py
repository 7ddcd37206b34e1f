"""Exception types shared across the package."""


class HierDensityError(Exception):
    """Base class for all package errors."""


class CapacityError(HierDensityError):
    """A dense object would exceed the configured memory cap."""


class ConfigError(HierDensityError, ValueError):
    """Invalid run configuration or incompatible inputs."""


class ShapeError(HierDensityError, ValueError):
    """Operands whose dimensions do not conform."""


class SVDConvergenceError(HierDensityError, ArithmeticError):
    """LAPACK failed to converge on an SVD."""
