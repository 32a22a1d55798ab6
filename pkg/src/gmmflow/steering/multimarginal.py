"""Multi-marginal momentum bridges between Gaussian mixtures.

Every tuple ``i = (i_1, ..., i_M)`` of component indices, one per marginal,
defines a Gaussian momentum bridge through those components. A transport
plan ``lambda`` over tuples, found by a multi-axis transportation LP on the
tuple costs, mixes the tuple policies into one feedback law on phase space
whose position marginals are the input mixtures.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .._jit import worker_count
from ..bridge import PairState, Trajectory, _mixture_eval
from ..errors import InfeasibleError, IntegrationDiverged, ValidationError
from ..gaussian import floor_spd
from ..gmm import Gmm, gmm_condition, gmm_sample
from ..transport import solve_mm_lp
from .momentum import COARSE_STEPS, FINE_STEPS, TimeMap, phase_grid, solve_momentum_batch
from .program import CsSolution
from .sdp import IpmSettings

PHASE_FLOOR = 1e-10


def _check_marginals(marginals: list[Gmm], times) -> np.ndarray:
    if len(marginals) < 2:
        raise ValidationError("need at least two marginals")
    d = marginals[0].dim
    if any(g.dim != d for g in marginals):
        raise ValidationError("all marginals must share a dimension")
    t = np.arange(len(marginals), dtype=float) if times is None else np.asarray(times, dtype=float)
    if t.shape != (len(marginals),):
        raise ValidationError("need one time per marginal")
    TimeMap.for_times(t)
    return t


def _full_covs(g: Gmm) -> np.ndarray:
    return np.stack([np.diag(c) for c in g.covs]) if g.is_diag else g.covs


def _tuple_targets(marginals: list[Gmm], tuples: np.ndarray):
    means = [g.means[tuples[:, j]] for j, g in enumerate(marginals)]
    covs = [_full_covs(g)[tuples[:, j]] for j, g in enumerate(marginals)]
    return means, covs


def _solve_tuples(marginals, tuples, taus, eps, steps, chunk, workers, settings) -> list[CsSolution | None]:
    if tuples.shape[0] == 0:
        return []
    pieces = [tuples[s : s + chunk] for s in range(0, tuples.shape[0], chunk)]

    def run(piece):
        means, covs = _tuple_targets(marginals, piece)
        try:
            return solve_momentum_batch(taus, means, covs, eps, steps, settings)
        except InfeasibleError:
            return [None] * piece.shape[0]

    n_workers = min(worker_count(workers), len(pieces))
    if n_workers <= 1:
        results = [run(p) for p in pieces]
    else:
        with ThreadPoolExecutor(n_workers) as pool:
            results = list(pool.map(run, pieces))
    return [s for part in results for s in part]


def mm_cost_tensor(
    marginals: list[Gmm],
    eps: float,
    times=None,
    steps_per_unit: int = COARSE_STEPS,
    chunk: int = 512,
    workers: int | None = None,
    settings: IpmSettings = IpmSettings(),
) -> np.ndarray:
    """Momentum-bridge cost of every component tuple, shape ``(N_1, ..., N_M)``.

    Tuples are solved in batches that share one time grid; batches run on
    a thread pool. Infeasible or unconverged tuples get ``+inf``.
    """
    if eps < 0:
        raise ValidationError("eps must be non-negative")
    t = _check_marginals(marginals, times)
    taus = TimeMap.for_times(t).to_internal(t)
    shape = tuple(g.num_components for g in marginals)
    tuples = np.array(list(itertools.product(*(range(n) for n in shape))), dtype=int)
    sols = _solve_tuples(marginals, tuples, taus, eps, steps_per_unit, chunk, workers, settings)
    costs = np.array([np.inf if s is None else s.objective for s in sols])
    return costs.reshape(shape)


@dataclass
class MultiMarginalModel:
    """Plan over component tuples plus the fine-grid policy of every supported tuple."""

    times: np.ndarray  # (M,) user times
    marginals: list[Gmm]
    eps: float
    indices: np.ndarray  # (S, M)
    lam: np.ndarray  # (S,)
    solutions: list[CsSolution]
    lp_objective: float
    steps_per_unit: int = FINE_STEPS
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.indices = np.asarray(self.indices, dtype=int).reshape(-1, len(self.marginals))
        self.lam = np.asarray(self.lam, dtype=float)
        if len(self.solutions) != self.lam.size or self.indices.shape[0] != self.lam.size:
            raise ValidationError("plan and solutions disagree in length")
        sol = self.solutions
        self._means = np.stack([s.means for s in sol])
        self._covs = np.stack([s.covs for s in sol])
        self._gains = np.stack([s.gains for s in sol])
        self._ff = np.stack([s.feedforward for s in sol])
        self._grid = sol[0].times
        self._states: dict[int, PairState] = {}

    @property
    def dim(self) -> int:
        return self.marginals[0].dim

    @property
    def phase_dim(self) -> int:
        return 2 * self.dim

    @property
    def time_map(self) -> TimeMap:
        return TimeMap.for_times(self.times)

    @property
    def grid(self) -> np.ndarray:
        """Internal time grid shared by all tuple solutions."""
        return self._grid

    @property
    def objective(self) -> float:
        """Plan cost with fine-grid tuple costs."""
        return float(np.sum(self.lam * np.array([s.objective for s in self.solutions])))

    def marks(self) -> list[int]:
        """Grid index of each marginal time."""
        taus = self.time_map.to_internal(self.times)
        return [int(np.argmin(np.abs(self._grid - tau))) for tau in taus]

    def axis_sums(self) -> list[np.ndarray]:
        out = []
        for j, g in enumerate(self.marginals):
            s = np.zeros(g.num_components)
            np.add.at(s, self.indices[:, j], self.lam)
            out.append(s)
        return out

    def step_index(self, t: float) -> int:
        """Grid step whose held control applies at user time ``t``."""
        tau = float(self.time_map.to_internal(t))
        grid = self._grid
        if tau < grid[0] - 1e-12 or tau > grid[-1] + 1e-12:
            raise ValidationError(f"t={t} outside [{self.times[0]}, {self.times[-1]}]")
        k = int(np.searchsorted(grid, tau + 1e-12, side="right")) - 1
        return min(max(k, 0), grid.size - 2)

    def grid_index(self, t: float) -> int:
        """Nearest grid point to user time ``t``."""
        tau = float(self.time_map.to_internal(t))
        if tau < self._grid[0] - 1e-12 or tau > self._grid[-1] + 1e-12:
            raise ValidationError(f"t={t} outside [{self.times[0]}, {self.times[-1]}]")
        return int(np.argmin(np.abs(self._grid - tau)))

    def phase_mixture_at(self, k: int) -> Gmm:
        # no flooring here: conditioning must keep degenerate velocity laws exact
        covs = 0.5 * (self._covs[:, k] + self._covs[:, k].transpose(0, 2, 1))
        return Gmm(self.lam / self.lam.sum(), self._means[:, k], covs, "full")

    def phase_mixture(self, t: float) -> Gmm:
        """Phase-space mixture ``sum_i lambda_i N(mu_i(t), Sigma_i(t))`` at the nearest grid point."""
        return self.phase_mixture_at(self.grid_index(t))

    def state_at(self, k: int) -> PairState:
        """Stacked tuple quantities for the control held on step ``k``."""
        if k not in self._states:
            if len(self._states) > 8:
                self._states.clear()
            covs = np.stack([floor_spd(0.5 * (c + c.T), PHASE_FLOOR) for c in self._covs[:, k]])
            chol = np.linalg.cholesky(covs)
            linv = np.linalg.inv(chol)
            prec = linv.transpose(0, 2, 1) @ linv
            logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
            with np.errstate(divide="ignore"):
                loglam = np.log(self.lam)
            self._states[k] = PairState(
                np.ascontiguousarray(self._means[:, k]),
                prec,
                np.ascontiguousarray(self._gains[:, k]),
                np.ascontiguousarray(self._ff[:, k]),
                loglam - 0.5 * logdet,
                False,
            )
        return self._states[k]

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "eps": self.eps,
            "marginals": [g.to_dict() for g in self.marginals],
            "plan": [{"idx": [int(v) for v in idx], "lambda": float(l)} for idx, l in zip(self.indices, self.lam)],
            "lp_objective": self.lp_objective,
            "steps_per_unit": self.steps_per_unit,
            "solutions": [s.to_dict() for s in self.solutions],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MultiMarginalModel":
        try:
            plan = data["plan"]
            return cls(
                np.asarray(data["times"], float),
                [Gmm.from_dict(g) for g in data["marginals"]],
                float(data["eps"]),
                np.array([p["idx"] for p in plan], dtype=int),
                np.array([p["lambda"] for p in plan], dtype=float),
                [CsSolution.from_dict(s) for s in data["solutions"]],
                float(data["lp_objective"]),
                int(data.get("steps_per_unit", FINE_STEPS)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed multi-marginal model: {exc}") from exc


def build_mm_model(
    marginals: list[Gmm],
    eps: float,
    times=None,
    coarse_steps: int = COARSE_STEPS,
    fine_steps: int = FINE_STEPS,
    workers: int | None = None,
    settings: IpmSettings = IpmSettings(),
) -> MultiMarginalModel:
    """Cost tensor on the coarse grid, LP plan, then fine-grid policies for the support."""
    t = _check_marginals(marginals, times)
    costs = mm_cost_tensor(marginals, eps, t, coarse_steps, workers=workers, settings=settings)
    plan = solve_mm_lp(costs, [g.weights for g in marginals])
    taus = TimeMap.for_times(t).to_internal(t)
    sols = _solve_tuples(marginals, plan.indices, taus, eps, fine_steps, 512, workers, settings)
    if any(s is None for s in sols):
        raise InfeasibleError("a supported tuple could not be solved on the fine grid")
    diag = {"tuples": int(costs.size), "support": int(plan.lam.size), "infinite": int(np.sum(~np.isfinite(costs)))}
    return MultiMarginalModel(t, list(marginals), float(eps), plan.indices, plan.lam, sols, plan.objective, fine_steps, diag)


def mm_drift(model: MultiMarginalModel, t: float, x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Mixture feedback at user time ``t`` for positions ``x`` and velocities ``v``.

    Tuple weights are ``lambda_i N((x, v); mu_i, Sigma_i)`` in the log
    domain with a max shift, so far from every tuple the control falls back
    to the most likely tuple's feedback.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    single = x.ndim == 1
    z = np.hstack([np.atleast_2d(x), np.atleast_2d(v)])
    if z.shape[1] != model.phase_dim:
        raise ValidationError("position and velocity must each have the model dimension")
    u = _mixture_eval(z, model.state_at(model.step_index(t)))
    return u[0] if single else u


def _conditional_parts(joint: Gmm, dx: int):
    """Per-component regression of velocity on position for batched conditioning."""
    covs = joint.covs
    sxx, sxv, svv = covs[:, :dx, :dx], covs[:, :dx, dx:], covs[:, dx:, dx:]
    chol = np.linalg.cholesky(np.stack([floor_spd(c) for c in sxx]))
    linv = np.linalg.inv(chol)
    b = linv @ sxv  # (P, dx, dv)
    cond = svv - b.transpose(0, 2, 1) @ b
    w, vec = np.linalg.eigh(0.5 * (cond + cond.transpose(0, 2, 1)))
    factor = vec * np.sqrt(np.clip(w, 0.0, None))[:, None, :]
    logdet = np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return linv, b, factor, logdet


def infer_velocity(model: MultiMarginalModel, t: float, x_obs: np.ndarray, seed=None) -> np.ndarray:
    """Draw velocities from the phase-space mixture at ``t`` conditioned on positions.

    A single position ``(d,)`` goes through :func:`gmm_condition`; a batch
    ``(n, d)`` uses the same formulas vectorized, one draw per row.
    """
    joint = model.phase_mixture(t)
    x_obs = np.asarray(x_obs, dtype=float)
    d = model.dim
    if x_obs.ndim == 1:
        return gmm_sample(gmm_condition(joint, x_obs), 1, seed)[0]
    if x_obs.ndim != 2 or x_obs.shape[1] != d:
        raise ValidationError("positions must have shape (n, d)")
    rng = np.random.default_rng(seed)
    linv, b, factor, logdet = _conditional_parts(joint, d)
    dev = x_obs[:, None, :] - joint.means[None, :, :d]  # (n, P, d)
    a = np.einsum("pij,npj->npi", linv, dev)
    with np.errstate(divide="ignore"):
        logw = np.log(joint.weights)[None] - 0.5 * np.sum(a * a, axis=2) - logdet[None]
    logw -= logsumexp(logw, axis=1, keepdims=True)
    prob = np.exp(logw)
    cum = np.cumsum(prob, axis=1)
    pick = np.minimum((cum < rng.random(x_obs.shape[0])[:, None] * cum[:, -1:]).sum(axis=1), prob.shape[1] - 1)
    rows = np.arange(x_obs.shape[0])
    mean = joint.means[pick, d:] + np.einsum("nij,ni->nj", b[pick], a[rows, pick])
    z = rng.standard_normal((x_obs.shape[0], d))
    return mean + np.einsum("nij,nj->ni", factor[pick], z)


@dataclass(frozen=True)
class MmIntegratorConfig:
    """Settings for :func:`mm_integrate`.

    The grid is the model's fine grid. ``record_every`` keeps every k-th
    state; states at marginal times and the final state are always kept.

    ``policy`` picks how the tuple feedbacks are combined each step.
    ``"average"`` applies the density-weighted mean of the tuple controls.
    ``"sample"`` draws one tuple per particle from the same weights and
    applies its control, which has the same conditional mean and keeps the
    phase mixture exact on the grid. ``"auto"`` samples when ``eps == 0``,
    where tuple laws are degenerate (velocity fixed by position) and the
    averaged control pushes particles off every tuple's support.
    """

    seed: int = 0
    record_every: int = 1
    block_size: int = 1024
    policy: str = "auto"

    def __post_init__(self):
        if self.policy not in ("auto", "average", "sample"):
            raise ValidationError(f"unknown policy {self.policy!r}")

    def resolved_policy(self, eps: float) -> str:
        if self.policy != "auto":
            return self.policy
        return "sample" if eps == 0 else "average"


def _sampled_feedback(z: np.ndarray, ps: PairState, rng: np.random.Generator) -> np.ndarray:
    """Control of one tuple per row, drawn with the mixture-policy weights."""
    dev = z[:, None, :] - ps.means[None]
    q = np.einsum("npi,pij,npj->np", dev, ps.prec, dev)
    logw = ps.logc[None] - 0.5 * q
    logw -= logw.max(axis=1, keepdims=True)
    cum = np.cumsum(np.exp(logw), axis=1)
    pick = (cum < rng.random(z.shape[0])[:, None] * cum[:, -1:]).sum(axis=1)
    pick = np.minimum(pick, cum.shape[1] - 1)
    rows = np.arange(z.shape[0])
    return np.einsum("nij,nj->ni", ps.gains[pick], dev[rows, pick]) + ps.vel[pick]


def _noise_factors(q: np.ndarray) -> np.ndarray:
    w, vec = np.linalg.eigh(0.5 * (q + q.transpose(0, 2, 1)))
    return vec * np.sqrt(np.clip(w, 0.0, None))[:, None, :]


def mm_integrate(model: MultiMarginalModel, x0: np.ndarray, cfg: MmIntegratorConfig = MmIntegratorConfig()) -> Trajectory:
    """Simulate the mixture policy from positions ``x0`` at ``t_1`` to ``t_M``.

    Initial velocities are drawn with :func:`infer_velocity`. Each step uses
    the exact sample-and-hold transition of the phase-space system, the
    same transition the tuple programs were solved with, so a single-tuple
    model reproduces its moment trajectory without discretization error.
    ``Trajectory.times`` are user times; states have ``2 d`` columns.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    if x.shape[1] != model.dim:
        raise ValidationError("initial points do not match the model dimension")
    n = x.shape[0]
    v = infer_velocity(model, float(model.times[0]), x, seed=[cfg.seed, 2**31 - 1])
    z = np.hstack([x, v])
    taus = model.time_map.to_internal(model.times)
    dsys, marks = phase_grid(taus, model.dim, model.eps, model.steps_per_unit)
    if dsys.steps != model.grid.size - 1:
        raise ValidationError("model grid does not match its step setting")
    noisy = model.eps > 0
    factors = _noise_factors(dsys.Q) if noisy else None
    bs = max(1, cfg.block_size)
    blocks = [slice(s, min(s + bs, n)) for s in range(0, n, bs)]
    rngs = [np.random.default_rng([cfg.seed, b]) for b in range(len(blocks))]
    keep = set(marks)
    frames = [z.copy()]
    times = [float(model.times[0])]
    energy = np.zeros(n)
    to_user = model.time_map.to_user
    sample = cfg.resolved_policy(model.eps) == "sample"
    for k in range(dsys.steps):
        ps = model.state_at(k)
        if sample:
            u = np.empty((n, dsys.B[k].shape[1]))
            for blk, rng in zip(blocks, rngs):
                u[blk] = _sampled_feedback(z[blk], ps, rng)
        else:
            u = _mixture_eval(z, ps)
        energy += np.sum(u * u, axis=1) * dsys.dts[k]
        z = z @ dsys.A[k].T + u @ dsys.B[k].T
        if noisy:
            for blk, rng in zip(blocks, rngs):
                z[blk] += rng.standard_normal((blk.stop - blk.start, z.shape[1])) @ factors[k].T
        if not np.all(np.isfinite(z)):
            raise IntegrationDiverged(k + 1)
        if (k + 1) % max(1, cfg.record_every) == 0 or (k + 1) in keep:
            frames.append(z.copy())
            times.append(float(to_user(dsys.times[k + 1])))
    return Trajectory(np.array(times), np.stack(frames), energy)


def marginal_positions(model: MultiMarginalModel, traj: Trajectory) -> list[np.ndarray]:
    """Position samples at each marginal time of a recorded trajectory."""
    out = []
    for t in model.times:
        idx = int(np.argmin(np.abs(traj.times - t)))
        if not math.isclose(traj.times[idx], t, rel_tol=1e-9, abs_tol=1e-9):
            raise ValidationError(f"trajectory has no frame at t={t}")
        out.append(traj.states[idx][:, : model.dim])
    return out


def mm_transport_cost_mc(model: MultiMarginalModel, n: int, cfg: MmIntegratorConfig = MmIntegratorConfig()) -> tuple[float, float]:
    """Monte Carlo control energy of the mixture policy and its standard error."""
    x0 = gmm_sample(model.marginals[0], n, cfg.seed)
    traj = mm_integrate(model, x0, MmIntegratorConfig(cfg.seed, 10**9, cfg.block_size, cfg.policy))
    e = traj.energy
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(n))
