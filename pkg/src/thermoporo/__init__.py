"""Finite element solver for quasi-static thermo-poroelasticity with
stress-dependent permeability."""
from .errors import ConfigurationError, DataError, ModelError, SolverError, ThermoporoError
from .mesh import Mesh, QuadratureRule, Rectangle, build_structured, quadrature, refine_uniform
from .model import PhysicalParams, build_case, derive_coefficients, permeability
from .solver import ClassicalSolver, MafeaSolver, SolverSettings
from .spaces import FeSpace, FieldVector, compute_error, interpolate, l2_project

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "DataError", "ModelError", "SolverError", "ThermoporoError",
    "Mesh", "QuadratureRule", "Rectangle", "build_structured", "quadrature", "refine_uniform",
    "PhysicalParams", "build_case", "derive_coefficients", "permeability",
    "ClassicalSolver", "MafeaSolver", "SolverSettings",
    "FeSpace", "FieldVector", "compute_error", "interpolate", "l2_project",
]
