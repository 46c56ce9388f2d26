"""Fit per-tet plastic strains so a tet mesh's elastic equilibrium matches markers."""
from .constraints import Constraint, ConstraintSet
from .material import MaterialParams
from .optimizer import SolveConfig, SolveReport, fit
from .tetmesh import MaterialPoint, MeshError, TetMesh

__version__ = "0.1.0"

__all__ = ["Constraint", "ConstraintSet", "MaterialParams", "SolveConfig", "SolveReport", "fit", "MaterialPoint",
           "MeshError", "TetMesh", "__version__"]
