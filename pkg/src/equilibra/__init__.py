"""Adaptive 2D finite elements with equilibrated-flux error estimation.

The package solves the Poisson problem and linear elasticity with Lagrange
elements, reconstructs H(div)-conforming equilibrated fluxes / weakly
symmetric stresses by patch-local minimization, evaluates guaranteed error
estimators and drives adaptive mesh refinement.
"""

from equilibra.adaptivity import (
    AdaptiveConfig,
    AdaptiveResult,
    ConvergenceHistory,
    adaptive_loop,
    mark_doerfler,
)
from equilibra.benchmarks import (
    CookProblem,
    QuadrantProblem,
    quadrant_exact_solution,
)
from equilibra.equilibration import EquilibratedField, Equilibrator, equilibrate
from equilibra.estimation import (
    EstimatorConstants,
    estimate_elasticity,
    estimate_heuristic,
    estimate_poisson,
    true_error,
)
from equilibra.mesh import (
    Mesh,
    Patch,
    build_patch,
    create_structured,
    refine_nvb,
    split_low_valence_boundary,
    write_vtk,
)
from equilibra.primal import (
    ElasticityProblem,
    PoissonProblem,
    compute_flux,
    solve_elasticity,
    solve_poisson,
)
from equilibra.spaces import DiscreteFunction, FunctionSpace, project_l2

__version__ = "0.1.0"

__all__ = [
    "AdaptiveConfig",
    "AdaptiveResult",
    "ConvergenceHistory",
    "CookProblem",
    "DiscreteFunction",
    "ElasticityProblem",
    "EquilibratedField",
    "Equilibrator",
    "EstimatorConstants",
    "FunctionSpace",
    "Mesh",
    "Patch",
    "PoissonProblem",
    "QuadrantProblem",
    "adaptive_loop",
    "build_patch",
    "compute_flux",
    "create_structured",
    "equilibrate",
    "estimate_elasticity",
    "estimate_heuristic",
    "estimate_poisson",
    "mark_doerfler",
    "project_l2",
    "quadrant_exact_solution",
    "refine_nvb",
    "solve_elasticity",
    "solve_poisson",
    "split_low_valence_boundary",
    "true_error",
    "write_vtk",
]
