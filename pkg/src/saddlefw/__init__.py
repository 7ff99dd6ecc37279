"""Frank-Wolfe driven proximal solvers for saddle problems over polytopes."""

from .core import (
    Atom,
    DimensionError,
    LinearMap,
    LinearPart,
    Lmo,
    QuadraticPart,
    SaddleProblem,
    SimplexLmo,
    SmoothPart,
    estimate_operator_norm,
    inner_product,
)
from .frankwolfe import ActiveSet, FwStats, SmoothObjective, fw_gap, fw_step, fw_until, project_simplex

__all__ = [
    "ActiveSet",
    "Atom",
    "DimensionError",
    "FwStats",
    "LinearMap",
    "LinearPart",
    "Lmo",
    "QuadraticPart",
    "SaddleProblem",
    "SimplexLmo",
    "SmoothObjective",
    "SmoothPart",
    "estimate_operator_norm",
    "fw_gap",
    "fw_step",
    "fw_until",
    "inner_product",
    "project_simplex",
]

__version__ = "0.1.0"
