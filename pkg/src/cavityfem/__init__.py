"""Mixed finite elements for multi-cavity growth in incompressible
nonlinear elasticity: defect-adapted meshes, curved mixed elements, a
damped Newton saddle-point solver and experiment drivers."""

from .errors import (
    CavityFemError,
    ConfigError,
    GeometryError,
    LineSearchError,
    MaterialDomainError,
    MeshStrategyError,
    NonConvergenceError,
    OrientationError,
    SolverError,
)
from .material import MaterialParams, Volumetric, reciprocal_volumetric
from .mesh import DefectSpec, Element, Layer, Mesh, MeshParams, polar_midpoint, validate_mesh
from .generate import build_mesh, make_ring_mesh, ring_schedule
from .fem import AffineBoundary, DofMap, FemSpace, State, build_dof_map, identity_state, interpolate

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
