"""Exception types shared across the package."""


class CavityFemError(Exception):
    """Base class for all package errors."""


class MaterialDomainError(CavityFemError):
    """Argument outside the admissible domain of a material law (e.g. det F <= 0)."""


class GeometryError(CavityFemError):
    """Invalid or degenerate geometry (coincident points, singular maps, bad loops)."""


class MeshStrategyError(CavityFemError):
    """The layering strategy constants admit no feasible layer."""


class OrientationError(CavityFemError):
    """A deformation state lost orientation (det of the gradient <= 0 somewhere)."""

    def __init__(self, message, element_id=None):
        super().__init__(message)
        self.element_id = element_id


class ConfigError(CavityFemError):
    """Inconsistent or incomplete experiment configuration."""


class SolverError(CavityFemError):
    """Linear or nonlinear solve failed."""


class LineSearchError(SolverError):
    """No admissible step length was found above the configured minimum."""


class NonConvergenceError(SolverError):
    """Newton iteration did not reach the requested tolerance."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class FieldLookupError(CavityFemError):
    """A physical point could not be located inside the target mesh."""
