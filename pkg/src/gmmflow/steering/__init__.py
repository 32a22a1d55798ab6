"""Covariance steering for linear prior dynamics and multi-marginal momentum bridges."""

from .ltv import DiscreteSystem, LtvSystem, check_controllable, controllability_gramian, discretize
from .momentum import COARSE_STEPS, FINE_STEPS, TimeMap, solve_momentum_bridge
from .multimarginal import (
    MmIntegratorConfig,
    MultiMarginalModel,
    build_mm_model,
    infer_velocity,
    marginal_positions,
    mm_cost_tensor,
    mm_drift,
    mm_integrate,
    mm_transport_cost_mc,
)
from .program import CsSolution, MomentConstraint, solve_program
from .sdp import IpmSettings
from .cs import solve_cs

__all__ = [
    "LtvSystem",
    "DiscreteSystem",
    "discretize",
    "controllability_gramian",
    "check_controllable",
    "CsSolution",
    "MomentConstraint",
    "IpmSettings",
    "solve_program",
    "solve_cs",
    "solve_momentum_bridge",
    "TimeMap",
    "COARSE_STEPS",
    "FINE_STEPS",
    "MultiMarginalModel",
    "MmIntegratorConfig",
    "build_mm_model",
    "mm_cost_tensor",
    "mm_drift",
    "infer_velocity",
    "mm_integrate",
    "marginal_positions",
    "mm_transport_cost_mc",
]
