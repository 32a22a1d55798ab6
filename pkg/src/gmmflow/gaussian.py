"""Gaussian marginals and closed-form Gaussian-to-Gaussian bridges.

Covariances are stored either as full ``(d, d)`` matrices or, for the
diagonal fast path, as ``(d,)`` vectors of variances. All functions accept
both forms; a pair of diagonal endpoints keeps every computation elementwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NotPsdError, NumericalError, ValidationError

COV_FLOOR = 1e-8
SYM_TOL = 1e-10


def _check_symmetric(m: np.ndarray) -> None:
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if m.size and float(np.max(np.abs(m - m.T))) > SYM_TOL * scale:
        raise ValidationError("matrix is not symmetric")


def floor_spd(m: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Clamp the eigenvalues of a symmetric matrix (or variance vector) to ``floor``.

    The input is returned unchanged when it already satisfies the floor.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        return m if m.min(initial=np.inf) >= floor else np.maximum(m, floor)
    try:
        # cheap certificate that every eigenvalue already exceeds the floor
        np.linalg.cholesky(m - floor * np.eye(m.shape[0]))
        return m
    except np.linalg.LinAlgError:
        pass
    w, v = np.linalg.eigh(m)
    if w[0] >= floor:
        return m
    out = (v * np.maximum(w, floor)) @ v.T
    return 0.5 * (out + out.T)


def sqrtm_spd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a symmetric positive semidefinite matrix.

    Parameters
    ----------
    m : ndarray, shape (d, d)
        Symmetric within 1e-10. Eigenvalues in ``[-1e-8, 0)`` are clamped
        to zero.

    Returns
    -------
    ndarray
        Symmetric PSD ``s`` with ``s @ s == m`` to rounding.

    Raises
    ------
    ValidationError
        If ``m`` is not square and symmetric.
    NotPsdError
        If ``m`` has an eigenvalue below ``-1e-8``.
    """
    m = np.asarray(m, dtype=float)
    _check_symmetric(m)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.size and w[0] < -1e-8:
        raise NotPsdError(f"matrix has eigenvalue {w[0]:.3e} < -1e-8")
    s = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (s + s.T)


def _sqrt_and_inv_sqrt(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh(m)
    w = np.maximum(w, COV_FLOOR)
    r = (v * np.sqrt(w)) @ v.T
    ri = (v / np.sqrt(w)) @ v.T
    return 0.5 * (r + r.T), 0.5 * (ri + ri.T)


@dataclass(frozen=True)
class Gaussian:
    """Multivariate normal law.

    ``cov`` is a full ``(d, d)`` matrix, or a ``(d,)`` vector holding the
    diagonal of a diagonal covariance.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1:
            raise ValidationError("mean must be a vector")
        d = mean.shape[0]
        if cov.ndim == 0 and d == 1:
            cov = cov.reshape(1, 1)
        if cov.ndim == 1:
            if cov.shape != (d,):
                raise ValidationError(f"diagonal covariance must have length {d}")
            if np.any(cov < -1e-8):
                raise NotPsdError("negative variance")
        else:
            if cov.shape != (d, d):
                raise ValidationError(f"covariance must be {d}x{d}, got {cov.shape}")
            _check_symmetric(cov)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValidationError("non-finite Gaussian parameters")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def is_diag(self) -> bool:
        return self.cov.ndim == 1

    def full_cov(self) -> np.ndarray:
        """Covariance as a dense ``(d, d)`` matrix."""
        return np.diag(self.cov) if self.is_diag else self.cov

    def trace(self) -> float:
        return float(np.sum(self.cov)) if self.is_diag else float(np.trace(self.cov))


def _check_pair(g0: Gaussian, g1: Gaussian) -> None:
    if g0.dim != g1.dim:
        raise ValidationError(f"dimension mismatch: {g0.dim} vs {g1.dim}")


def cross_eigenvalues(g0: Gaussian, g1: Gaussian) -> np.ndarray:
    """Eigenvalues of ``Sigma0^{1/2} Sigma1 Sigma0^{1/2}`` (covariances floored).

    These are also the eigenvalues of ``Sigma0 Sigma1`` and are symmetric in
    the two arguments up to rounding.
    """
    _check_pair(g0, g1)
    if g0.is_diag and g1.is_diag:
        return floor_spd(g0.cov) * floor_spd(g1.cov)
    r0, _ = _sqrt_and_inv_sqrt(g0.full_cov())
    p = r0 @ floor_spd(g1.full_cov()) @ r0
    return np.clip(np.linalg.eigvalsh(0.5 * (p + p.T)), 0.0, None)


def cost_from_eigenvalues(
    mean_gap_sq: float, tr0: float, tr1: float, logdet1: float, lam: np.ndarray, eps: float
) -> float:
    """Exact control energy of the Gaussian bridge from spectral data.

    ``lam`` holds the eigenvalues of ``Sigma0^{1/2} Sigma1 Sigma0^{1/2}``. At
    ``eps = 0`` the expression is the squared Bures-Wasserstein distance.
    """
    lam = np.asarray(lam, dtype=float)
    if eps == 0.0:
        return float(mean_gap_sq + tr0 + tr1 - 2.0 * np.sum(np.sqrt(lam)))
    root = np.sqrt(eps * eps + 4.0 * lam)
    return float(
        mean_gap_sq
        + tr0
        + tr1
        - np.sum(root)
        + eps * np.sum(np.log(0.5 * (eps + root)))
        - eps * logdet1
    )


def _logdet(g: Gaussian) -> float:
    if g.is_diag:
        return float(np.sum(np.log(floor_spd(g.cov))))
    sign, val = np.linalg.slogdet(floor_spd(g.cov))
    if sign <= 0:
        raise NumericalError("covariance is not positive definite")
    return float(val)


def bw_distance_sq(g0: Gaussian, g1: Gaussian) -> float:
    """Squared Bures-Wasserstein (2-Wasserstein) distance between Gaussians."""
    lam = cross_eigenvalues(g0, g1)
    gap = float(np.sum((g1.mean - g0.mean) ** 2))
    return max(cost_from_eigenvalues(gap, g0.trace(), g1.trace(), 0.0, lam, 0.0), 0.0)


def gsb_cost(g0: Gaussian, g1: Gaussian, eps: float) -> float:
    """Optimal expected control energy ``E int_0^1 |u_t|^2 dt`` of the Gaussian bridge.

    The bridge follows ``dx = u dt + sqrt(eps) dw``. The value equals
    :func:`gsb_cost_reduced` plus ``eps * d * (1 + log(eps / 2))``; the added
    term depends only on ``eps`` and ``d`` and keeps costs comparable across
    noise levels and with Monte Carlo energy estimates.

    Parameters
    ----------
    g0, g1 : Gaussian
        Endpoint laws of equal dimension.
    eps : float
        Noise level, ``>= 0``. ``eps = 0`` returns :func:`bw_distance_sq`.
    """
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    if eps == 0:
        return bw_distance_sq(g0, g1)
    lam = cross_eigenvalues(g0, g1)
    gap = float(np.sum((g1.mean - g0.mean) ** 2))
    return cost_from_eigenvalues(gap, g0.trace(), g1.trace(), _logdet(g1), lam, float(eps))


def energy_offset(eps: float, dim: int) -> float:
    """Boundary-independent difference between :func:`gsb_cost` and the reduced cost."""
    if eps == 0:
        return 0.0
    return float(eps * dim * (1.0 + np.log(eps / 2.0)))


def gsb_cost_reduced(g0: Gaussian, g1: Gaussian, eps: float) -> float:
    """Bridge cost with the boundary-independent constant removed.

    ``|dmu|^2 + tr S0 + tr S1 - eps (tr M - logdet M + logdet S1)`` with
    ``M = I + (I + (4 / eps^2) S0 S1)^{1/2}``.
    """
    return gsb_cost(g0, g1, eps) - energy_offset(eps, g0.dim)


@dataclass(frozen=True)
class GsbPolicy:
    """Affine feedback of the Gaussian bridge between ``g0`` and ``g1``.

    The drift at ``(t, x)`` is ``K_t (x - mu_t) + v`` with
    ``K_t = S_t^T Sigma_t^{-1}``. ``coupling`` holds the cross-covariance
    term ``C`` and ``root`` the matrix ``D``; both are vectors on the
    diagonal fast path.
    """

    g0: Gaussian
    g1: Gaussian
    eps: float
    coupling: np.ndarray = field(repr=False)
    root: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return self.g0.dim

    @property
    def is_diag(self) -> bool:
        return self.coupling.ndim == 1

    @property
    def velocity(self) -> np.ndarray:
        return self.g1.mean - self.g0.mean

    def mean(self, t: float) -> np.ndarray:
        return (1.0 - t) * self.g0.mean + t * self.g1.mean

    def cov(self, t: float) -> np.ndarray:
        s = 1.0 - t
        c = self.coupling
        if self.is_diag:
            return s * s * self.g0.cov + t * t * self.g1.cov + s * t * (2.0 * c + self.eps)
        mid = c + c.T + self.eps * np.eye(self.dim)
        out = s * s * self.g0.cov + t * t * self.g1.cov + s * t * mid
        return 0.5 * (out + out.T)

    def cross(self, t: float) -> np.ndarray:
        """The matrix ``S_t`` entering the gain."""
        c = self.coupling
        if self.is_diag:
            return t * (self.g1.cov - c) - (1.0 - t) * (self.g0.cov - c) - self.eps * t
        eye = np.eye(self.dim)
        return t * (self.g1.cov - c.T) - (1.0 - t) * (self.g0.cov - c) - self.eps * t * eye

    def gain(self, t: float) -> np.ndarray:
        """Feedback gain ``K_t``; a vector on the diagonal fast path."""
        cov = self.cov(t)
        st = self.cross(t)
        if self.is_diag:
            if np.any(cov <= 0):
                raise NumericalError(f"singular bridge covariance at t={t}")
            return st / cov
        try:
            return np.linalg.solve(cov, st).T
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular bridge covariance at t={t}") from exc

    def drift(self, t: float, x: np.ndarray) -> np.ndarray:
        """Drift for points ``x`` of shape ``(d,)`` or ``(n, d)``."""
        x = np.asarray(x, dtype=float)
        k = self.gain(t)
        dev = x - self.mean(t)
        if self.is_diag:
            return dev * k + self.velocity
        return dev @ k.T + self.velocity


def gsb_policy(g0: Gaussian, g1: Gaussian, eps: float) -> GsbPolicy:
    """Closed-form optimal policy of the Gaussian bridge with noise level ``eps``."""
    _check_pair(g0, g1)
    if eps < 0:
        raise ValidationError("eps must be nonnegative")
    eps = float(eps)
    if g0.is_diag and g1.is_diag:
        a = floor_spd(g0.cov)
        b = floor_spd(g1.cov)
        root = np.sqrt(4.0 * a * b + eps * eps)
        coupling = 0.5 * (root - eps)
        return GsbPolicy(Gaussian(g0.mean, a), Gaussian(g1.mean, b), eps, coupling, root)
    s0 = floor_spd(g0.full_cov())
    s1 = floor_spd(g1.full_cov())
    r0, r0_inv = _sqrt_and_inv_sqrt(s0)
    inner = 4.0 * (r0 @ s1 @ r0) + eps * eps * np.eye(g0.dim)
    root = sqrtm_spd(0.5 * (inner + inner.T))
    coupling = 0.5 * (r0 @ root @ r0_inv - eps * np.eye(g0.dim))
    return GsbPolicy(Gaussian(g0.mean, s0), Gaussian(g1.mean, s1), eps, coupling, root)


def gsb_marginal(p: GsbPolicy, t: float) -> Gaussian:
    """Time-``t`` marginal of the bridge; exact endpoints at ``t`` in {0, 1}."""
    if not 0.0 <= t <= 1.0:
        raise ValidationError(f"t={t} outside [0, 1]")
    if t == 0.0:
        return p.g0
    if t == 1.0:
        return p.g1
    return Gaussian(p.mean(t), p.cov(t))
