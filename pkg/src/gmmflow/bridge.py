"""Two-marginal mixture bridges.

Every pair of source/target components gets its closed-form Gaussian bridge;
a transportation LP over the pair costs picks which pairs carry mass, and the
feasible mixture drift averages the active pair drifts with weights
proportional to ``lam_ij * rho_{t|ij}(x)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._jit import JIT_ENABLED, maybe_njit, worker_count
from .errors import IntegrationDiverged, ValidationError
from .gaussian import COV_FLOOR, Gaussian, GsbPolicy, cost_from_eigenvalues, floor_spd, gsb_policy
from .gmm import Gmm
from .transport import TransportPlan, solve_transport_lp

UNDERFLOW_LOG = -700.0


def _component_sqrts(g: Gmm) -> np.ndarray:
    out = np.empty((g.num_components, g.dim, g.dim))
    for k in range(g.num_components):
        w, v = np.linalg.eigh(floor_spd(g.covs[k]))
        r = (v * np.sqrt(np.maximum(w, COV_FLOOR))) @ v.T
        out[k] = 0.5 * (r + r.T)
    return out


def _logdets(g: Gmm) -> np.ndarray:
    if g.is_diag:
        return np.sum(np.log(np.maximum(g.covs, COV_FLOOR)), axis=1)
    return np.array([np.linalg.slogdet(floor_spd(c))[1] for c in g.covs])


def cost_matrix(gmm0: Gmm, gmm1: Gmm, eps: float, workers: int | None = None) -> np.ndarray:
    """Pairwise bridge costs ``J_ij`` (see :func:`gmmflow.gaussian.gsb_cost`).

    Rows are evaluated concurrently on up to ``workers`` threads, capped by
    ``GMMFLOW_THREADS``.
    """
    if gmm0.dim != gmm1.dim:
        raise ValidationError(f"dimension mismatch: {gmm0.dim} vs {gmm1.dim}")
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    n0, n1 = gmm0.num_components, gmm1.num_components
    tr0 = np.array([c.sum() if gmm0.is_diag else np.trace(c) for c in gmm0.covs])
    tr1 = np.array([c.sum() if gmm1.is_diag else np.trace(c) for c in gmm1.covs])
    logdet1 = _logdets(gmm1) if eps > 0 else np.zeros(n1)
    gaps = np.sum((gmm0.means[:, None, :] - gmm1.means[None, :, :]) ** 2, axis=2)
    diag = gmm0.is_diag and gmm1.is_diag
    if diag:
        var0 = np.maximum(gmm0.covs, COV_FLOOR)
        var1 = np.maximum(gmm1.covs, COV_FLOOR)
    else:
        sq0 = _component_sqrts(gmm0)
        full1 = np.stack([floor_spd(np.diag(c) if gmm1.is_diag else c) for c in gmm1.covs])
        if gmm0.is_diag:
            tr0 = np.array([c.sum() for c in gmm0.covs])

    def row(i: int) -> np.ndarray:
        if diag:
            lam = var0[i][None, :] * var1
        else:
            p = sq0[i] @ full1 @ sq0[i]
            lam = np.clip(np.linalg.eigvalsh(0.5 * (p + p.transpose(0, 2, 1))), 0.0, None)
        return np.array([
            cost_from_eigenvalues(gaps[i, j], tr0[i], tr1[j], logdet1[j], lam[j], float(eps))
            for j in range(n1)
        ])

    nw = min(worker_count(workers), n0)
    if nw > 1:
        with ThreadPoolExecutor(max_workers=nw) as pool:
            rows = list(pool.map(row, range(n0)))
    else:
        rows = [row(i) for i in range(n0)]
    out = np.vstack(rows)
    if not np.all(np.isfinite(out)):
        raise ValidationError("non-finite pair cost")
    return out


@dataclass(frozen=True)
class BridgeModel:
    """Trained two-marginal bridge: plan support, pair policies and ``j_ot``."""

    gmm0: Gmm
    gmm1: Gmm
    eps: float
    plan: TransportPlan
    policies: tuple[GsbPolicy, ...]
    pair_costs: np.ndarray
    j_ot: float
    _stack: dict = field(default=None, repr=False, compare=False)

    @property
    def dim(self) -> int:
        return self.gmm0.dim

    @property
    def is_diag(self) -> bool:
        return all(p.is_diag for p in self.policies)

    @property
    def lam(self) -> np.ndarray:
        return self.plan.lam

    def pair_state(self, t: float) -> "PairState":
        return _pair_state(self, t)

    def stacked(self) -> dict:
        """Policy parameters stacked along a leading pair axis (cached)."""
        if self._stack is None:
            st = {
                "m0": np.stack([p.g0.mean for p in self.policies]),
                "m1": np.stack([p.g1.mean for p in self.policies]),
                "s0": np.stack([p.g0.cov for p in self.policies]),
                "s1": np.stack([p.g1.cov for p in self.policies]),
                "c": np.stack([p.coupling for p in self.policies]),
                "loglam": np.log(self.plan.lam),
            }
            object.__setattr__(self, "_stack", st)
        return self._stack

    def to_dict(self) -> dict:
        return {
            "eps": float(self.eps),
            "gmm0": self.gmm0.to_dict(),
            "gmm1": self.gmm1.to_dict(),
            "plan": self.plan.to_list(),
            "j_ot": float(self.j_ot),
            "objective_iterations": int(self.plan.iterations),
            "policies": [
                {
                    "i": int(i),
                    "j": int(j),
                    "cost": float(c),
                    "coupling": [float(v) for v in p.coupling.ravel()],
                    "root": [float(v) for v in p.root.ravel()],
                }
                for i, j, c, p in zip(self.plan.rows, self.plan.cols, self.pair_costs, self.policies)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BridgeModel":
        try:
            gmm0 = Gmm.from_dict(data["gmm0"])
            gmm1 = Gmm.from_dict(data["gmm1"])
            eps = float(data["eps"])
            entries = data["plan"]
            rows = np.array([e["i"] for e in entries], dtype=np.int64)
            cols = np.array([e["j"] for e in entries], dtype=np.int64)
            lam = np.array([e["lambda"] for e in entries], dtype=float)
            pols = {(int(p["i"]), int(p["j"])): p for p in data["policies"]}
            policies = []
            costs = []
            for i, j in zip(rows, cols):
                rec = pols[(int(i), int(j))]
                g0, g1 = gmm0.component(i), gmm1.component(j)
                shape = (gmm0.dim,) if (g0.is_diag and g1.is_diag) else (gmm0.dim, gmm0.dim)
                base = gsb_policy(g0, g1, eps)
                policies.append(GsbPolicy(base.g0, base.g1, eps,
                                          np.array(rec["coupling"], float).reshape(shape),
                                          np.array(rec["root"], float).reshape(shape)))
                costs.append(float(rec["cost"]))
            j_ot = float(data["j_ot"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed bridge document: {exc}") from exc
        plan = TransportPlan(rows, cols, lam, gmm0.weights, gmm1.weights, j_ot)
        return cls(gmm0, gmm1, eps, plan, tuple(policies), np.array(costs), j_ot)


def build_bridge(gmm0: Gmm, gmm1: Gmm, eps: float, workers: int | None = None) -> BridgeModel:
    """Solve the component LP and instantiate pair policies on its support."""
    costs = cost_matrix(gmm0, gmm1, eps, workers)
    plan = solve_transport_lp(costs, gmm0.weights, gmm1.weights)
    policies = tuple(
        gsb_policy(gmm0.component(i), gmm1.component(j), eps) for i, j in zip(plan.rows, plan.cols)
    )
    pair_costs = costs[plan.rows, plan.cols]
    j_ot = float(np.sum(plan.lam * pair_costs))
    return BridgeModel(gmm0, gmm1, float(eps), plan, policies, pair_costs, j_ot)


# ---------------------------------------------------------------------------
# time-t pair quantities, batched over pairs


@dataclass
class PairState:
    """Pair means, precisions, gains and log weights at one time, stacked over pairs."""

    means: np.ndarray  # (P, d)
    prec: np.ndarray  # (P, d, d) or (P, d)
    gains: np.ndarray  # (P, m, d) or (P, d)
    vel: np.ndarray  # (P, m)
    logc: np.ndarray  # (P,) log lam - 0.5 logdet
    diag: bool


def _pair_state(model: BridgeModel, t: float) -> PairState:
    st = model.stacked()
    s = 1.0 - t
    eps = model.eps
    means = s * st["m0"] + t * st["m1"]
    vel = st["m1"] - st["m0"]
    c = st["c"]
    if model.is_diag:
        cov = s * s * st["s0"] + t * t * st["s1"] + s * t * (2.0 * c + eps)
        cross = t * (st["s1"] - c) - s * (st["s0"] - c) - eps * t
        prec = 1.0 / cov
        gains = cross * prec
        logdet = np.sum(np.log(cov), axis=1)
        return PairState(means, prec, gains, vel, st["loglam"] - 0.5 * logdet, True)
    d = model.dim
    eye = np.eye(d)
    ct = c.transpose(0, 2, 1)
    cov = s * s * st["s0"] + t * t * st["s1"] + s * t * (c + ct + eps * eye)
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    cross = t * (st["s1"] - ct) - s * (st["s0"] - c) - eps * t * eye
    chol = np.linalg.cholesky(cov)
    linv = np.linalg.inv(chol)
    prec = linv.transpose(0, 2, 1) @ linv
    gains = cross.transpose(0, 2, 1) @ prec
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return PairState(means, prec, gains, vel, st["loglam"] - 0.5 * logdet, False)


@maybe_njit
def _mixture_kernel_full(x, means, prec, gains, vel, logc, out):
    n, d = x.shape
    m = out.shape[1]
    p_count = means.shape[0]
    dev = np.empty((p_count, d))
    logw = np.empty(p_count)
    for a in range(n):
        best = -np.inf
        for p in range(p_count):
            for i in range(d):
                dev[p, i] = x[a, i] - means[p, i]
            q = 0.0
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += prec[p, i, j] * dev[p, j]
                q += dev[p, i] * acc
            logw[p] = logc[p] - 0.5 * q
            if logw[p] > best:
                best = logw[p]
        total = 0.0
        for i in range(m):
            out[a, i] = 0.0
        for p in range(p_count):
            z = logw[p] - best
            if z < -700.0:
                continue
            w = math.exp(z)
            total += w
            for i in range(m):
                acc = vel[p, i]
                for j in range(d):
                    acc += gains[p, i, j] * dev[p, j]
                out[a, i] += w * acc
        for i in range(m):
            out[a, i] /= total


@maybe_njit
def _mixture_kernel_diag(x, means, prec, gains, vel, logc, out):
    n, d = x.shape
    p_count = means.shape[0]
    logw = np.empty(p_count)
    for a in range(n):
        best = -np.inf
        for p in range(p_count):
            q = 0.0
            for i in range(d):
                r = x[a, i] - means[p, i]
                q += r * r * prec[p, i]
            logw[p] = logc[p] - 0.5 * q
            if logw[p] > best:
                best = logw[p]
        total = 0.0
        for i in range(d):
            out[a, i] = 0.0
        for p in range(p_count):
            z = logw[p] - best
            if z < -700.0:
                continue
            w = math.exp(z)
            total += w
            for i in range(d):
                out[a, i] += w * (gains[p, i] * (x[a, i] - means[p, i]) + vel[p, i])
        for i in range(d):
            out[a, i] /= total


def _mixture_numpy(x, ps: PairState) -> np.ndarray:
    dev = x[:, None, :] - ps.means[None]  # (n, P, d)
    if ps.diag:
        q = np.einsum("npi,pi,npi->np", dev, ps.prec, dev)
        drifts = dev * ps.gains[None] + ps.vel[None]
    else:
        q = np.einsum("npi,pij,npj->np", dev, ps.prec, dev)
        drifts = np.einsum("pij,npj->npi", ps.gains, dev) + ps.vel[None]
    logw = ps.logc[None] - 0.5 * q
    z = logw - logw.max(axis=1, keepdims=True)
    w = np.where(z < UNDERFLOW_LOG, 0.0, np.exp(z))
    w /= w.sum(axis=1, keepdims=True)
    return np.einsum("np,npi->ni", w, drifts)


def _mixture_eval(x: np.ndarray, ps: PairState, use_jit: bool | None = None) -> np.ndarray:
    use_jit = JIT_ENABLED if use_jit is None else use_jit
    if not use_jit:
        return _mixture_numpy(x, ps)
    out = np.empty((x.shape[0], ps.vel.shape[1]))
    kernel = _mixture_kernel_diag if ps.diag else _mixture_kernel_full
    kernel(np.ascontiguousarray(x), ps.means, ps.prec, ps.gains, ps.vel, ps.logc, out)
    return out


def mixture_drift(model: BridgeModel, t: float, x: np.ndarray) -> np.ndarray:
    """Feasible mixture drift at time ``t`` for points ``(d,)`` or ``(n, d)``.

    Pair weights are computed in the log domain with a max shift; shifted
    weights below ``exp(-700)`` are dropped, so far from the flow's support
    the drift falls back to the most likely pair's drift.
    """
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t={t} outside [0, 1]")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    if xs.shape[1] != model.dim:
        raise ValidationError("point dimension does not match the model")
    out = _mixture_eval(xs, _pair_state(model, t))
    return out[0] if single else out


def flow_marginal(model: BridgeModel, t: float) -> Gmm:
    """Mixture of the pair marginals at time ``t`` weighted by the plan."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t={t} outside [0, 1]")
    comps = [p.g0 if t == 0 else p.g1 if t == 1 else Gaussian(p.mean(t), p.cov(t)) for p in model.policies]
    w = model.plan.lam / model.plan.lam.sum()
    return Gmm.from_components(w, comps)


# ---------------------------------------------------------------------------
# integration


@dataclass(frozen=True)
class IntegratorConfig:
    """Settings for :func:`integrate`.

    ``dt=None`` selects 1e-3 when the model is stochastic and 1e-2 otherwise.
    ``record_every`` keeps every k-th state (the final state is always kept).
    """

    dt: float | None = None
    scheme: str = "euler"
    seed: int = 0
    record_every: int = 1
    block_size: int = 1024

    def resolved_dt(self, eps: float) -> float:
        dt = self.dt if self.dt is not None else (1e-3 if eps > 0 else 1e-2)
        if not dt > 0:
            raise ValidationError("dt must be positive")
        return float(dt)


@dataclass
class Trajectory:
    times: np.ndarray  # (F,)
    states: np.ndarray  # (F, n, d)
    energy: np.ndarray | None = None  # per-particle left Riemann sum of |u|^2 dt

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _time_grid(dt: float) -> np.ndarray:
    steps = max(1, int(round(1.0 / dt)))
    return np.linspace(0.0, 1.0, steps + 1)


def integrate(model: BridgeModel, x0: np.ndarray, cfg: IntegratorConfig = IntegratorConfig()) -> Trajectory:
    """Simulate the mixture flow from ``x0`` over ``[0, 1]``.

    ``model`` may be any object with ``dim``, ``eps`` and a ``pair_state(t)``
    method returning the stacked pair quantities at time ``t``.

    Stochastic models use Euler-Maruyama; deterministic ones use Euler or
    classical RK4 (``cfg.scheme``). Noise for particle block ``b`` comes from
    a generator seeded by ``(cfg.seed, b)``, so results do not depend on how
    blocks are scheduled.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    if x.shape[1] != model.dim:
        raise ValidationError("initial points do not match the model dimension")
    if cfg.scheme not in ("euler", "rk4"):
        raise ValidationError(f"unknown scheme {cfg.scheme!r}")
    dt = cfg.resolved_dt(model.eps)
    grid = _time_grid(dt)
    h = grid[1] - grid[0]
    n = x.shape[0]
    bs = max(1, cfg.block_size)
    blocks = [slice(s, min(s + bs, n)) for s in range(0, n, bs)]
    rngs = [np.random.default_rng([cfg.seed, b]) for b in range(len(blocks))]
    noise = math.sqrt(model.eps * h)
    rk4 = cfg.scheme == "rk4" and model.eps == 0
    # Euler never queries past 1 - h; RK4 stages need the true endpoint drift
    t_cap = 1.0 if rk4 else 1.0 - h
    frames = [x.copy()]
    times = [0.0]
    energy = np.zeros(n)
    cache: dict[float, PairState] = {}

    def state_at(t: float) -> PairState:
        t = min(t, t_cap)
        if t not in cache:
            if len(cache) > 4:
                cache.clear()
            cache[t] = model.pair_state(t)
        return cache[t]

    steps = grid.size - 1
    for k in range(steps):
        t = grid[k]
        u = _mixture_eval(x, state_at(t))
        energy += np.sum(u * u, axis=1) * h
        if rk4:
            k2 = _mixture_eval(x + 0.5 * h * u, state_at(t + 0.5 * h))
            k3 = _mixture_eval(x + 0.5 * h * k2, state_at(t + 0.5 * h))
            k4 = _mixture_eval(x + h * k3, state_at(t + h))
            x = x + h / 6.0 * (u + 2.0 * k2 + 2.0 * k3 + k4)
        else:
            x = x + h * u
            if noise > 0:
                for blk, rng in zip(blocks, rngs):
                    x[blk] += noise * rng.standard_normal((blk.stop - blk.start, model.dim))
        if not np.all(np.isfinite(x)):
            raise IntegrationDiverged(k + 1)
        if (k + 1) % max(1, cfg.record_every) == 0 or k + 1 == steps:
            frames.append(x.copy())
            times.append(float(grid[k + 1]))
    return Trajectory(np.array(times), np.stack(frames), energy)


def sample_source(model: BridgeModel, n: int, seed: int) -> np.ndarray:
    from .gmm import gmm_sample

    return gmm_sample(model.gmm0, n, seed=np.random.SeedSequence([seed, 7919]))


def transport_cost_mc(model: BridgeModel, n: int, cfg: IntegratorConfig = IntegratorConfig()) -> tuple[float, float]:
    """Monte Carlo estimate of ``E int_0^1 |u_t(x_t)|^2 dt`` and its standard error."""
    if n < 100:
        raise ValidationError("need at least 100 particles")
    x0 = sample_source(model, n, cfg.seed)
    big = max(1, int(round(1.0 / cfg.resolved_dt(model.eps))))
    traj = integrate(model, x0, IntegratorConfig(cfg.dt, cfg.scheme, cfg.seed, big, cfg.block_size))
    e = traj.energy
    return float(e.mean()), float(e.std(ddof=1) / math.sqrt(n))


def _pair_drifts_at(model: BridgeModel, ts: np.ndarray, xs: np.ndarray):
    """Per-sample mixture drift and all pair drifts at individual times."""
    st = model.stacked()
    s = (1.0 - ts)[:, None]
    tt = ts[:, None]
    eps = model.eps
    means = s[:, :, None] * st["m0"][None] + tt[:, :, None] * st["m1"][None]  # (n, P, d)
    dev = xs[:, None, :] - means
    vel = (st["m1"] - st["m0"])[None]
    c = st["c"]
    if model.is_diag:
        a = s[:, :, None]
        b = tt[:, :, None]
        cov = a * a * st["s0"][None] + b * b * st["s1"][None] + a * b * (2.0 * c[None] + eps)
        cross = b * (st["s1"] - c)[None] - a * (st["s0"] - c)[None] - eps * b
        drifts = dev * cross / cov + vel
        q = np.sum(dev * dev / cov, axis=2)
        logdet = np.sum(np.log(cov), axis=2)
    else:
        d = model.dim
        eye = np.eye(d)
        ct = c.transpose(0, 2, 1)
        a = s[:, :, None, None]
        b = tt[:, :, None, None]
        cov = a * a * st["s0"][None] + b * b * st["s1"][None] + a * b * (c + ct + eps * eye)[None]
        cross = b * (st["s1"] - ct)[None] - a * (st["s0"] - c)[None] - eps * b * eye
        chol = np.linalg.cholesky(cov)
        sol = np.linalg.solve(cov, dev[..., None])[..., 0]
        drifts = np.einsum("npji,npj->npi", cross, sol) + vel
        y = np.linalg.solve(chol, dev[..., None])[..., 0]
        q = np.sum(y * y, axis=2)
        logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=2, axis2=3)), axis=2)
    logw = st["loglam"][None] - 0.5 * (q + logdet)
    z = logw - logw.max(axis=1, keepdims=True)
    w = np.where(z < UNDERFLOW_LOG, 0.0, np.exp(z))
    w /= w.sum(axis=1, keepdims=True)
    mix = np.einsum("np,npi->ni", w, drifts)
    return mix, drifts


def optimality_gap_mc(model: BridgeModel, n: int, seed: int = 0, chunk: int = 4096) -> tuple[float, float]:
    """Monte Carlo estimate of ``j_ot - J_mixture`` and its standard error.

    Draws a pair from the plan, a time uniformly on ``[0, 1)`` and a point
    from that pair's marginal, then averages the squared distance between the
    pair drift and the mixture drift.
    """
    if n < 100:
        raise ValidationError("need at least 100 samples")
    rng = np.random.default_rng([seed, 104729])
    lam = model.plan.lam / model.plan.lam.sum()
    pairs = rng.choice(lam.size, size=n, p=lam)
    ts = rng.uniform(0.0, 1.0, size=n)
    z = rng.standard_normal((n, model.dim))
    vals = np.empty(n)
    for s in range(0, n, chunk):
        sl = slice(s, min(s + chunk, n))
        xs = np.empty((sl.stop - sl.start, model.dim))
        for r, (p, t) in enumerate(zip(pairs[sl], ts[sl])):
            pol = model.policies[p]
            cov = pol.cov(t)
            if pol.is_diag:
                xs[r] = pol.mean(t) + np.sqrt(cov) * z[s + r]
            else:
                xs[r] = pol.mean(t) + np.linalg.cholesky(cov) @ z[s + r]
        mix, drifts = _pair_drifts_at(model, ts[sl], xs)
        own = drifts[np.arange(xs.shape[0]), pairs[sl]]
        vals[sl] = np.sum((own - mix) ** 2, axis=1)
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n))
