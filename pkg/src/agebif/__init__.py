"""Bifurcation analysis for age-structured populations with nonlinear diffusion."""

__version__ = "0.1.0"

from .model import ModelSpec, holling_tanner_setup, make_model, validate
from .ageprop import (
    Discretization,
    analytic_k,
    apply_Q,
    find_lambda0,
    propagate,
    spectral_radius,
)
from .equilibrium import (
    BifurcationDiagram,
    BranchPoint,
    DensityField,
    continue_branch,
    jacobian,
    residual,
    tangent_at_critical,
)

__all__ = [
    "ModelSpec", "make_model", "holling_tanner_setup", "validate",
    "Discretization", "propagate", "apply_Q", "spectral_radius", "analytic_k", "find_lambda0",
    "DensityField", "BranchPoint", "BifurcationDiagram", "residual", "jacobian",
    "tangent_at_critical", "continue_branch",
]
