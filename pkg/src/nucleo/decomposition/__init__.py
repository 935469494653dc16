"""Near-convex shape decomposition by exact cut selection."""

from .boundary import (BoundaryPolygon, boundary_curvature, concave_points,
                       inward_normals, trace_boundary)
from .core import DecomposedParts, decompose, rasterize_segment
from .cuts import (Cut, CutSelectionProblem, all_pair_concavity, cut_weight,
                   enumerate_cuts_and_mutex, measure_concavity, pair_concavity)
from .solver import (CutCapacityError, InfeasibleCutSelection, selection_cost,
                     solve_cut_selection)

__all__ = [
    "BoundaryPolygon", "Cut", "CutCapacityError", "CutSelectionProblem",
    "DecomposedParts", "InfeasibleCutSelection", "all_pair_concavity",
    "boundary_curvature", "concave_points", "cut_weight", "decompose",
    "enumerate_cuts_and_mutex", "inward_normals", "measure_concavity",
    "pair_concavity", "rasterize_segment", "selection_cost",
    "solve_cut_selection", "trace_boundary",
]
