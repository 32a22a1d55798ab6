"""Moment-steering programs over a discretized linear system.

Under the affine policy ``u_k = K_k (x_k - mu_k) + v_k`` the mean and the
covariance evolve separately:

    mu_{k+1}    = A_k mu_k + B_k v_k
    Sigma_{k+1} = A_k Sigma_k A_k^T + A_k U_k^T B_k^T + B_k U_k A_k^T
                  + B_k Y_k B_k^T + Q_k,        U_k = K_k Sigma_k

with ``Y_k = U_k Sigma_k^{-1} U_k^T``. Relaxing that equality to
``[[Sigma_k, U_k^T], [U_k, Y_k]] >= 0`` makes the covariance part a linear
SDP whose optimum is tight; the mean part is an equality-constrained
least-squares problem with a closed-form KKT solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InfeasibleError, NumericalError, ValidationError
from .ltv import DiscreteSystem, check_controllable
from .sdp import Family, IpmResult, IpmSettings, StagedSdp, Term, solve_staged_sdp

SLACK_TOL = 1e-5


@dataclass(frozen=True)
class MomentConstraint:
    """Pin ``P mu_k`` and ``P Sigma_k P^T`` at grid index ``step``; ``P`` is ``(p, n)``."""

    step: int
    select: np.ndarray


@dataclass
class CsSolution:
    """Optimal affine policy and moment trajectory for one steering problem.

    ``gains[k]`` and ``feedforward[k]`` act on ``[t_k, t_{k+1})``; moments
    are given at all ``K + 1`` grid points.
    """

    times: np.ndarray  # (K+1,)
    gains: np.ndarray  # (K, m, n)
    feedforward: np.ndarray  # (K, m)
    means: np.ndarray  # (K+1, n)
    covs: np.ndarray  # (K+1, n, n)
    objective: float
    mean_cost: float
    cov_cost: float
    slack: np.ndarray  # (K,) tr(Y_k - U_k Sigma_k^-1 U_k^T)
    ytrace: np.ndarray  # (K,)
    diagnostics: dict = field(default_factory=dict)

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    @property
    def steps(self) -> int:
        return self.gains.shape[0]

    @property
    def relative_slack(self) -> float:
        """``max_k slack_k / (1 + tr Y_k)``, the losslessness certificate."""
        return float(np.max(self.slack / (1.0 + self.ytrace)))

    def control_mean_sq(self) -> np.ndarray:
        """Expected ``|u_k|^2`` per step, ``|v_k|^2 + tr(K_k Sigma_k K_k^T)``."""
        kk = self.gains
        cov = self.covs[:-1]
        return np.sum(self.feedforward**2, axis=1) + np.einsum("kij,kjl,kil->k", kk, cov, kk)

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "gains": self.gains.ravel().tolist(),
            "feedforward": self.feedforward.ravel().tolist(),
            "means": self.means.ravel().tolist(),
            "covs": self.covs.ravel().tolist(),
            "shape": [int(self.steps), int(self.gains.shape[1]), int(self.gains.shape[2])],
            "objective": self.objective,
            "mean_cost": self.mean_cost,
            "cov_cost": self.cov_cost,
            "slack": self.slack.tolist(),
            "ytrace": self.ytrace.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CsSolution":
        try:
            k, m, n = (int(v) for v in data["shape"])
            return cls(
                np.asarray(data["times"], float),
                np.asarray(data["gains"], float).reshape(k, m, n),
                np.asarray(data["feedforward"], float).reshape(k, m),
                np.asarray(data["means"], float).reshape(k + 1, n),
                np.asarray(data["covs"], float).reshape(k + 1, n, n),
                float(data["objective"]),
                float(data["mean_cost"]),
                float(data["cov_cost"]),
                np.asarray(data["slack"], float),
                np.asarray(data["ytrace"], float),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed steering solution: {exc}") from exc


def _check_constraints(dsys: DiscreteSystem, cons: list[MomentConstraint]) -> None:
    n = dsys.state_dim
    if not cons or cons[0].step != 0:
        raise ValidationError("the first constraint must fix the initial moments")
    steps = [c.step for c in cons]
    if any(b <= a for a, b in zip(steps, steps[1:])):
        raise ValidationError("constraint steps must be strictly increasing")
    for c in cons:
        if not 0 <= c.step <= dsys.steps:
            raise ValidationError(f"constraint step {c.step} is off the grid")
        if c.select.ndim != 2 or c.select.shape[1] != n:
            raise ValidationError("constraint selector has the wrong width")


def build_cov_sdp(dsys: DiscreteSystem, cons: list[MomentConstraint], covs: list[np.ndarray]) -> StagedSdp:
    """Covariance SDP with blocks ``X_k = [[Sigma_k, U_k^T], [U_k, Y_k]]``, ``k = 0..K``.

    Stage ``k`` holds the recursion into ``Sigma_k`` plus any constraint at
    ``k``. The last block only carries ``Sigma_K``; its ``Y_K`` is priced
    like the others so the optimum sets it to zero.
    """
    n, m, K = dsys.state_dim, dsys.control_dim, dsys.steps
    size = n + m
    batch = covs[0].shape[0]
    jsel = np.hstack([np.eye(n), np.zeros((n, m))])
    by_step = {c.step: (c, v) for c, v in zip(cons, covs)}
    stages: list[list[Family]] = []
    for k in range(K + 1):
        fams = []
        if k > 0:
            e = np.hstack([dsys.A[k - 1], dsys.B[k - 1]])
            q = np.broadcast_to(dsys.Q[k - 1], (batch, n, n)).copy()
            fams.append(Family([Term(k, jsel, 1.0), Term(k - 1, e, -1.0)], q))
        if k in by_step:
            c, v = by_step[k]
            fams.append(Family([Term(k, c.select @ jsel, 1.0)], np.asarray(v, float)))
        stages.append(fams)
    dts = dsys.dts
    costs = np.zeros((K + 1, size, size))
    costs[:, n:, n:] = np.concatenate([dts, dts[-1:]])[:, None, None] * np.eye(m)
    return StagedSdp(size, costs, stages)


def solve_means(dsys: DiscreteSystem, cons: list[MomentConstraint], means: list[np.ndarray]):
    """Minimum-energy feedforward meeting the mean constraints.

    Minimizes ``sum_k dt |v_k|^2`` over ``v`` and the unconstrained part of
    ``mu_0``. Returns ``(mu, v)`` with shapes ``(T, K+1, n)`` and ``(T, K, m)``.
    """
    n, m, K = dsys.state_dim, dsys.control_dim, dsys.steps
    width = n + K * m
    # propagate the affine map z -> mu_k, z = (mu_0, v_0, ..., v_{K-1})
    maps = np.zeros((K + 1, n, width))
    maps[0, :, :n] = np.eye(n)
    for k in range(K):
        maps[k + 1] = dsys.A[k] @ maps[k]
        maps[k + 1, :, n + k * m : n + (k + 1) * m] += dsys.B[k]
    g = np.vstack([c.select @ maps[c.step] for c in cons])
    h = np.hstack([np.asarray(v, float) for v in means])  # (T, rows)
    hess = np.zeros((width, width))
    hess[n:, n:] = np.diag(2.0 * np.repeat(dsys.dts, m))
    rows = g.shape[0]
    kkt = np.block([[hess, g.T], [g, np.zeros((rows, rows))]])
    rhs = np.hstack([np.zeros((h.shape[0], width)), h]).T
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError as exc:
        raise InfeasibleError("mean constraints are inconsistent or underdetermined") from exc
    z = sol[:width].T
    mu = np.einsum("kiw,tw->tki", maps, z)
    v = z[:, n:].reshape(-1, K, m)
    resid = np.abs(np.einsum("rw,tw->tr", g, z) - h).max(initial=0.0)
    if resid > 1e-8 * (1.0 + np.abs(h).max(initial=0.0)):
        raise InfeasibleError(f"mean constraints cannot be met (residual {resid:.2e})")
    return mu, v


def _extract(X: np.ndarray, n: int):
    """Covariances, gains, slack and tr Y from PSD blocks via a Cholesky split.

    With ``X = L L^T`` partitioned conformally, ``K = L21 L11^{-1}`` and the
    Schur complement ``Y - U Sigma^{-1} U^T = L22 L22^T``.
    """
    Xs = 0.5 * (X + np.swapaxes(X, -1, -2))
    try:
        low = np.linalg.cholesky(Xs)
    except np.linalg.LinAlgError:
        w, vec = np.linalg.eigh(Xs)
        floor = 1e-15 * np.maximum(w[..., -1:], 1e-300)
        low = np.linalg.cholesky((vec * np.maximum(w, floor)[..., None, :]) @ np.swapaxes(vec, -1, -2))
    l11, l21, l22 = low[..., :n, :n], low[..., n:, :n], low[..., n:, n:]
    gains = np.swapaxes(np.linalg.solve(np.swapaxes(l11, -1, -2), np.swapaxes(l21, -1, -2)), -1, -2)
    slack = np.sum(l22 * l22, axis=(-2, -1))
    ytr = np.trace(Xs[..., n:, n:], axis1=-2, axis2=-1)
    return Xs[..., :n, :n], gains, slack, ytr


def solve_program_batch(
    dsys: DiscreteSystem,
    cons: list[MomentConstraint],
    means: list[np.ndarray],
    covs: list[np.ndarray],
    settings: IpmSettings = IpmSettings(),
    check: bool = True,
) -> tuple[list[CsSolution | None], IpmResult]:
    """Solve one constraint structure for a batch of moment targets.

    ``means[i]`` is ``(T, p_i)`` and ``covs[i]`` is ``(T, p_i, p_i)`` for
    constraint ``i``. Members whose solver run does not converge come back
    as ``None`` with nothing else affected. The raw solver result is
    returned alongside for diagnostics.
    """
    _check_constraints(dsys, cons)
    if len(means) != len(cons) or len(covs) != len(cons):
        raise ValidationError("need one mean and covariance target per constraint")
    if check:
        for a, b in zip(cons, cons[1:]):
            check_controllable(dsys, a.step, b.step)
    mu, v = solve_means(dsys, cons, means)
    prob = build_cov_sdp(dsys, cons, covs)
    res = solve_staged_sdp(prob, settings)
    n, K = dsys.state_dim, dsys.steps
    sig, gains, slack, ytr = _extract(res.X, n)
    times = dsys.times
    dts = dsys.dts
    out: list[CsSolution | None] = []
    for t in range(prob.batch):
        if not res.converged[t]:
            out.append(None)
            continue
        mean_cost = float(np.sum(dts * np.sum(v[t] ** 2, axis=1)))
        cov_cost = float(np.sum(dts * ytr[t, :K]))
        diag = {
            "iterations": int(res.iterations[t]),
            "primal_residual": float(res.primal_residual[t]),
            "dual_residual": float(res.dual_residual[t]),
            "gap": float(res.gap[t]),
            "method": dsys.method,
            "converged": True,
            "tol_met": bool(res.diagnostics["tol_met"][t]),
        }
        out.append(
            CsSolution(
                times,
                gains[t, :K],
                v[t],
                mu[t],
                sig[t],
                mean_cost + cov_cost,
                mean_cost,
                cov_cost,
                slack[t, :K],
                ytr[t, :K],
                diag,
            )
        )
    return out, res


def solve_program(dsys, cons, means, covs, settings: IpmSettings = IpmSettings()) -> CsSolution:
    """Single-problem wrapper around :func:`solve_program_batch`; raises on failure."""
    sols, res = solve_program_batch(
        dsys, cons, [np.asarray(m, float)[None] for m in means], [np.asarray(c, float)[None] for c in covs], settings
    )
    if sols[0] is None:
        raise NumericalError(
            "steering SDP did not converge: "
            f"primal {res.primal_residual[0]:.2e}, dual {res.dual_residual[0]:.2e}, gap {res.gap[0]:.2e} "
            f"after {res.iterations[0]} iterations"
        )
    return sols[0]
