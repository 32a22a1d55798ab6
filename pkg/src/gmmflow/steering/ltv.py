"""Linear time-varying prior dynamics and their discretization.

The continuous model is ``dx = (A x + B u) dt + D dW``. Discretization over a
grid of ``K`` steps produces ``x_{k+1} = A_k x_k + B_k u_k + w_k`` with
``w_k ~ N(0, Q_k)`` and the control held constant on each step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import expm

from ..errors import InfeasibleError, ValidationError

GRAMIAN_TOL = 1e-8


def _as_schedule(m, name: str) -> tuple[np.ndarray, bool]:
    arr = np.asarray(m, dtype=float)
    if arr.ndim == 2:
        return arr, False
    if arr.ndim == 3:
        return arr, True
    raise ValidationError(f"{name} must be a matrix or a (K, rows, cols) table")


@dataclass(frozen=True)
class LtvSystem:
    """Prior dynamics ``dx = (A x + B u) dt + D dW``.

    Each matrix is either constant (2-D) or tabulated per solver step
    (3-D, leading axis of length ``K``).
    """

    A: np.ndarray
    B: np.ndarray
    D: np.ndarray

    def __post_init__(self):
        a, _ = _as_schedule(self.A, "A")
        b, _ = _as_schedule(self.B, "B")
        d, _ = _as_schedule(self.D, "D")
        n = a.shape[-1]
        if a.shape[-2] != n:
            raise ValidationError("A must be square")
        if b.shape[-2] != n or d.shape[-2] != n:
            raise ValidationError("B and D must have as many rows as A")
        lengths = {m.shape[0] for m in (a, b, d) if m.ndim == 3}
        if len(lengths) > 1:
            raise ValidationError("tabulated matrices disagree on the number of steps")
        for m, name in ((a, "A"), (b, "B"), (d, "D")):
            if not np.all(np.isfinite(m)):
                raise ValidationError(f"{name} has non-finite entries")
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "B", b)
        object.__setattr__(self, "D", d)

    @property
    def state_dim(self) -> int:
        return self.A.shape[-1]

    @property
    def control_dim(self) -> int:
        return self.B.shape[-1]

    @property
    def tabulated(self) -> bool:
        return any(m.ndim == 3 for m in (self.A, self.B, self.D))

    @classmethod
    def integrator(cls, dim: int, eps: float = 0.0) -> "LtvSystem":
        """``dx = u dt + sqrt(eps) dW``."""
        eye = np.eye(dim)
        return cls(np.zeros((dim, dim)), eye, np.sqrt(eps) * eye)

    @classmethod
    def double_integrator(cls, dim: int, eps: float = 0.0) -> "LtvSystem":
        """Position-velocity system driven by acceleration, noise on velocity."""
        z = np.zeros((dim, dim))
        eye = np.eye(dim)
        a = np.block([[z, eye], [z, z]])
        b = np.vstack([z, eye])
        return cls(a, b, np.sqrt(eps) * b)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "B": self.B.tolist(), "D": self.D.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "LtvSystem":
        try:
            return cls(data["A"], data["B"], data["D"])
        except KeyError as exc:
            raise ValidationError(f"system document lacks {exc}") from exc


@dataclass(frozen=True)
class DiscreteSystem:
    """Per-step transition ``x_{k+1} = A_k x_k + B_k u_k + w_k``, ``w_k ~ N(0, Q_k)``."""

    A: np.ndarray  # (K, n, n)
    B: np.ndarray  # (K, n, m)
    Q: np.ndarray  # (K, n, n)
    times: np.ndarray  # (K+1,)
    method: str = "zoh"
    diagnostics: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    @property
    def control_dim(self) -> int:
        return self.B.shape[2]

    @property
    def dts(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def dt(self) -> float:
        """Step size of a uniform grid (the mean step otherwise)."""
        return float((self.times[-1] - self.times[0]) / self.steps)


def concat_discrete(parts: list[DiscreteSystem]) -> DiscreteSystem:
    """Join consecutive discretizations into one grid."""
    for a, b in zip(parts, parts[1:]):
        if abs(a.times[-1] - b.times[0]) > 1e-12 * max(1.0, abs(b.times[0])):
            raise ValidationError("discretized pieces are not contiguous")
    times = np.concatenate([parts[0].times] + [p.times[1:] for p in parts[1:]])
    methods = {p.method for p in parts}
    method = methods.pop() if len(methods) == 1 else "mixed"
    return DiscreteSystem(
        np.concatenate([p.A for p in parts]),
        np.concatenate([p.B for p in parts]),
        np.concatenate([p.Q for p in parts]),
        times,
        method,
        {"method": method},
    )


def zoh_step(a: np.ndarray, b: np.ndarray, d: np.ndarray, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact sample-and-hold transition for constant ``(A, B, D)`` over ``dt``.

    ``B_k`` comes from the augmented exponential of ``[[A, B], [0, 0]]`` and
    the noise covariance from Van Loan's block ``[[-A, D D^T], [0, A^T]]``.
    """
    n, m = b.shape
    aug = np.zeros((n + m, n + m))
    aug[:n, :n] = a
    aug[:n, n:] = b
    e = expm(aug * dt)
    ad, bd = e[:n, :n], e[:n, n:]
    vl = np.zeros((2 * n, 2 * n))
    vl[:n, :n] = -a
    vl[:n, n:] = d @ d.T
    vl[n:, n:] = a.T
    f = expm(vl * dt)
    qd = f[n:, n:].T @ f[:n, n:]
    return ad, bd, 0.5 * (qd + qd.T)


def discretize(sys: LtvSystem, horizon: float, steps: int, t0: float = 0.0) -> DiscreteSystem:
    """Discretize ``sys`` over ``[t0, t0 + horizon]`` with ``steps`` equal steps.

    Constant systems use the exact zero-order hold. Any tabulated matrix
    switches to first-order Euler (``A_k = I + A dt``, ``B_k = B dt``,
    ``Q_k = D D^T dt``), recorded as ``diagnostics["method"] == "euler"``.
    """
    if steps < 2:
        raise ValidationError("need at least 2 steps")
    if not (np.isfinite(horizon) and horizon > 0):
        raise ValidationError("horizon must be positive and finite")
    dt = horizon / steps
    grid = t0 + dt * np.arange(steps + 1)
    n = sys.state_dim
    if not sys.tabulated:
        ad, bd, qd = zoh_step(sys.A, sys.B, sys.D, dt)
        if not (np.all(np.isfinite(ad)) and np.all(np.isfinite(bd)) and np.all(np.isfinite(qd))):
            raise ValidationError("matrix exponential overflowed; reduce the step")
        rep = lambda m: np.repeat(m[None], steps, axis=0)  # noqa: E731
        return DiscreteSystem(rep(ad), rep(bd), rep(qd), grid, "zoh", {"method": "zoh"})
    tables = []
    for m in (sys.A, sys.B, sys.D):
        if m.ndim == 3 and m.shape[0] != steps:
            raise ValidationError(f"tabulated matrices have {m.shape[0]} steps, expected {steps}")
        tables.append(m if m.ndim == 3 else np.repeat(m[None], steps, axis=0))
    a, b, d = tables
    ad = np.eye(n)[None] + a * dt
    bd = b * dt
    qd = d @ d.transpose(0, 2, 1) * dt
    return DiscreteSystem(ad, bd, qd, grid, "euler", {"method": "euler", "first_order": True})


def controllability_gramian(dsys: DiscreteSystem, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Reachability Gramian ``sum_k Phi(stop, k+1) B_k B_k^T Phi(stop, k+1)^T``."""
    stop = dsys.steps if stop is None else stop
    n = dsys.state_dim
    w = np.zeros((n, n))
    for k in range(start, stop):
        w = dsys.A[k] @ w @ dsys.A[k].T + dsys.B[k] @ dsys.B[k].T
    return 0.5 * (w + w.T)


def check_controllable(dsys: DiscreteSystem, start: int = 0, stop: int | None = None, tol: float = GRAMIAN_TOL) -> float:
    """Smallest singular value of the Gramian; raises when it is below ``tol``.

    The threshold is relative to the largest singular value so that the
    test does not depend on the units of the state.
    """
    s = np.linalg.svd(controllability_gramian(dsys, start, stop), compute_uv=False)
    ratio = s[-1] / s[0] if s[0] > 0 else 0.0
    if ratio < tol:
        raise InfeasibleError(f"system is not controllable on the horizon (Gramian ratio {ratio:.3e})")
    return float(s[-1])
