"""Two-point covariance steering on the full state."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from ..gaussian import Gaussian
from .ltv import DiscreteSystem
from .program import CsSolution, MomentConstraint, solve_program
from .sdp import IpmSettings


def solve_cs(dsys: DiscreteSystem, g0: Gaussian, g1: Gaussian, settings: IpmSettings = IpmSettings()) -> CsSolution:
    """Steer ``N(mu0, Sigma0)`` at the first grid point to ``N(mu1, Sigma1)`` at the last.

    Minimizes ``sum_k (|v_k|^2 + tr Y_k) dt_k``, the expected control energy
    of the affine policy on the discretized system.

    Raises
    ------
    InfeasibleError
        If ``(A_k, B_k)`` is not controllable over the horizon.
    NumericalError
        If the interior-point solver stops before meeting its tolerance;
        the message carries the final residuals.
    """
    n = dsys.state_dim
    if g0.dim != n or g1.dim != n:
        raise ValidationError(f"endpoints must have the state dimension {n}")
    for g in (g0, g1):
        if np.linalg.eigvalsh(g.full_cov())[0] <= 0:
            raise ValidationError("endpoint covariances must be positive definite")
    eye = np.eye(n)
    cons = [MomentConstraint(0, eye), MomentConstraint(dsys.steps, eye)]
    return solve_program(dsys, cons, [g0.mean, g1.mean], [g0.full_cov(), g1.full_cov()], settings)
