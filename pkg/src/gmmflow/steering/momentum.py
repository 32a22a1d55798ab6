"""Momentum bridges: phase-space steering with constraints on positions only.

The state is ``z = (x, v)`` with ``dx = v dt`` and ``dv = u dt + sqrt(eps) dW``.
User times ``t_1 < ... < t_M`` are mapped to internal times
``tau = (t - t_1) / h`` with ``h`` the mean marginal spacing, so equally
spaced marginals sit one time unit apart. Costs, controls and velocities are
reported in internal units.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..gaussian import Gaussian
from .ltv import DiscreteSystem, LtvSystem, concat_discrete, discretize
from .program import CsSolution, MomentConstraint, solve_program, solve_program_batch
from .sdp import IpmSettings

COARSE_STEPS = 10
FINE_STEPS = 100


@dataclass(frozen=True)
class TimeMap:
    """Affine map from user time to internal time, ``tau = (t - origin) / scale``."""

    origin: float
    scale: float

    @classmethod
    def for_times(cls, times) -> "TimeMap":
        t = np.asarray(times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValidationError("need at least two marginal times")
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) <= 0):
            raise ValidationError("marginal times must be finite and strictly increasing")
        return cls(float(t[0]), float((t[-1] - t[0]) / (t.size - 1)))

    def to_internal(self, t):
        return (np.asarray(t, dtype=float) - self.origin) / self.scale

    def to_user(self, tau):
        return self.origin + self.scale * np.asarray(tau, dtype=float)


def phase_grid(taus: np.ndarray, dim: int, eps: float, steps_per_unit: int) -> tuple[DiscreteSystem, list[int]]:
    """ZOH discretization of the phase-space system through the internal times ``taus``.

    Each interval of length ``L`` gets ``max(2, round(steps_per_unit * L))``
    steps. Returns the grid and the step index of every marginal time.
    """
    sys = LtvSystem.double_integrator(dim, eps)
    parts, marks = [], [0]
    for a, b in zip(taus, taus[1:]):
        k = max(2, int(round(steps_per_unit * (b - a))))
        parts.append(discretize(sys, float(b - a), k, float(a)))
        marks.append(marks[-1] + k)
    return concat_discrete(parts), marks


def position_constraints(dim: int, marks: list[int]) -> list[MomentConstraint]:
    sel = np.hstack([np.eye(dim), np.zeros((dim, dim))])
    return [MomentConstraint(k, sel) for k in marks]


def _unpack(position_marginals):
    times, gs = [], []
    for item in position_marginals:
        t, g = item
        times.append(float(t))
        gs.append(g if isinstance(g, Gaussian) else Gaussian(*g))
    if len(gs) < 2:
        raise ValidationError("need at least two marginals")
    d = gs[0].dim
    if any(g.dim != d for g in gs):
        raise ValidationError("marginals must share a dimension")
    return np.array(times), gs, d


def solve_momentum_bridge(
    position_marginals,
    eps: float,
    steps_per_unit: int = FINE_STEPS,
    settings: IpmSettings = IpmSettings(),
) -> CsSolution:
    """Minimum-energy phase-space bridge through Gaussian position marginals.

    Parameters
    ----------
    position_marginals : sequence of (t_i, Gaussian)
        Strictly increasing times; the Gaussians constrain position only.
    eps : float
        Noise level on the velocity channel.

    Returns
    -------
    CsSolution
        Over the internal time grid; ``diagnostics["time_map"]`` holds the
        ``(origin, scale)`` pair that maps back to user time.
    """
    if eps < 0:
        raise ValidationError("eps must be non-negative")
    times, gs, d = _unpack(position_marginals)
    tmap = TimeMap.for_times(times)
    dsys, marks = phase_grid(tmap.to_internal(times), d, eps, steps_per_unit)
    cons = position_constraints(d, marks)
    sol = solve_program(dsys, cons, [g.mean for g in gs], [g.full_cov() for g in gs], settings)
    sol.diagnostics["time_map"] = (tmap.origin, tmap.scale)
    sol.diagnostics["marks"] = marks
    return sol


def solve_momentum_batch(
    taus: np.ndarray,
    means: list[np.ndarray],
    covs: list[np.ndarray],
    eps: float,
    steps_per_unit: int,
    settings: IpmSettings = IpmSettings(),
) -> list[CsSolution | None]:
    """Batched momentum bridges sharing one time grid.

    ``means[i]`` is ``(T, d)`` and ``covs[i]`` is ``(T, d, d)`` for marginal ``i``.
    """
    d = means[0].shape[1]
    dsys, marks = phase_grid(np.asarray(taus, float), d, eps, steps_per_unit)
    sols, _ = solve_program_batch(dsys, position_constraints(d, marks), means, covs, settings)
    for s in sols:
        if s is not None:
            s.diagnostics["marks"] = marks
    return sols
