"""Goal-adaptive isogeometric Kirchhoff-Love shell analysis."""

from .adapt import Continuation, MarkConfig, adaptive_loop
from .dwr import GoalFunctional, estimate_goal, goal_value
from .errors import ContinuationError, GeometryError, GoalIgaError, NonConvergenceError, ResourceLimitError, SolverError
from .estimator import GoalAdaptiveSolver
from .shell import Constraint, EdgeLoad, Material, PointLoad, ShellProblem, StateVector
from .solve import ArcLengthConfig, arc_length, buckling_analysis, linear_static, modal_analysis, newton_solve
from .thb import CellId, HierarchicalMesh, ThbSpace

__version__ = "0.1.0"

__all__ = [
    "ArcLengthConfig",
    "CellId",
    "Constraint",
    "Continuation",
    "ContinuationError",
    "EdgeLoad",
    "GeometryError",
    "GoalAdaptiveSolver",
    "GoalFunctional",
    "GoalIgaError",
    "HierarchicalMesh",
    "MarkConfig",
    "Material",
    "NonConvergenceError",
    "ResourceLimitError",
    "PointLoad",
    "ShellProblem",
    "SolverError",
    "StateVector",
    "ThbSpace",
    "adaptive_loop",
    "arc_length",
    "buckling_analysis",
    "estimate_goal",
    "goal_value",
    "linear_static",
    "modal_analysis",
    "newton_solve",
]
