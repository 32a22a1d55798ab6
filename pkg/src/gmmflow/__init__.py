"""Gaussian-mixture bridges, covariance steering and transport metrics."""

from .bridge import BridgeModel, IntegratorConfig, build_bridge, integrate
from .errors import GmmflowError, InfeasibleError, NumericalError, ValidationError
from .gaussian import Gaussian, bw_distance_sq, gsb_cost
from .gmm import EmConfig, Gmm, em_fit, gmm_logpdf, gmm_sample

__version__ = "0.1.0"

__all__ = [
    "BridgeModel",
    "EmConfig",
    "Gaussian",
    "Gmm",
    "GmmflowError",
    "InfeasibleError",
    "IntegratorConfig",
    "NumericalError",
    "ValidationError",
    "build_bridge",
    "bw_distance_sq",
    "em_fit",
    "gmm_logpdf",
    "gmm_sample",
    "gsb_cost",
    "integrate",
]
