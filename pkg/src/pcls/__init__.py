"""Shape-restricted least squares via penalized quadratic programming.

Fits multivariate concave or convex (optionally monotone) piecewise-linear
regression functions through three interchangeable formulations: the
original pairwise-constrained QP, a penalized non-negative QP, and the
separable dual of the penalized problem.
"""

from .model import (
    Curvature,
    Dataset,
    FitDiagnostics,
    FitResult,
    Formulation,
    ShapeSpec,
    StackedVariables,
    extract_hyperplanes,
)
from .matrices import AssembledProblem, assemble
from .qp import QpProblem, QpSolution, SolverConfig, SolveStatus, solve
from .reference import solve_reference

__all__ = [
    "AssembledProblem",
    "Curvature",
    "Dataset",
    "FitDiagnostics",
    "FitResult",
    "Formulation",
    "QpProblem",
    "QpSolution",
    "ShapeSpec",
    "SolveStatus",
    "SolverConfig",
    "StackedVariables",
    "assemble",
    "extract_hyperplanes",
    "solve",
    "solve_reference",
]
