"""Sample-based evaluation metrics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ValidationError
from .gaussian import Gaussian, bw_distance_sq
from .transport import solve_transport_lp

BW_REGULARIZATION = 1e-8


@dataclass(frozen=True)
class SampleSet:
    """Point cloud of shape ``(n, d)`` with optional per-row labels."""

    points: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2:
            raise ValidationError("points must be an (n, d) matrix")
        if not np.all(np.isfinite(pts)):
            raise ValidationError("points contain non-finite entries")
        object.__setattr__(self, "points", pts)


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, SampleSet) else SampleSet(x).points


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = _points(a), _points(b)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    return a, b


def _canonical(x: np.ndarray) -> np.ndarray:
    """Rows in lexicographic order, so randomized steps ignore input ordering."""
    return x[np.lexsort(x.T[::-1])]


def _moments(x: np.ndarray) -> Gaussian:
    n, d = x.shape
    if n < d + 1:
        warnings.warn(f"{n} samples cannot give a full-rank covariance in dimension {d}", stacklevel=3)
    cov = np.cov(x, rowvar=False, bias=False).reshape(d, d) if n > 1 else np.zeros((d, d))
    return Gaussian(x.mean(axis=0), 0.5 * (cov + cov.T) + BW_REGULARIZATION * np.eye(d))


def empirical_bw(a, b) -> float:
    """Bures-Wasserstein distance between the empirical moments of two clouds."""
    a, b = _pair(a, b)
    return bw_distance_sq(_moments(a), _moments(b))


ConditionalSampler = Callable[[np.ndarray, int, np.random.Generator], np.ndarray]


def cbw_uvp(
    hat_sampler: ConditionalSampler,
    star_sampler: ConditionalSampler,
    x0,
    per_x_draws: int = 1000,
    seed: int = 0,
) -> float:
    """Conditional Bures-Wasserstein unexplained variance percentage.

    Parameters
    ----------
    hat_sampler, star_sampler : callable
        ``sampler(x0_point, n, rng)`` returns ``n`` draws of ``x1`` given ``x0``.
    x0 : array_like, shape (m, d0)
        Conditioning points.
    per_x_draws : int
        Draws per conditioning point, at least 100.

    Returns
    -------
    float
        ``100 / (Var(rho1) / 2)`` times the mean conditional BW distance,
        where ``Var(rho1)`` is the total variance of the pooled star draws.
    """
    if per_x_draws < 100:
        raise ValidationError("per_x_draws must be at least 100")
    pts = _canonical(_points(x0))
    rng_hat = np.random.default_rng([seed, 1])
    rng_star = np.random.default_rng([seed, 2])
    dists = np.empty(pts.shape[0])
    n_pool = 0
    pool_sum = None
    pool_sq = None
    for k, x in enumerate(pts):
        hat = np.asarray(hat_sampler(x, per_x_draws, rng_hat), dtype=float)
        star = np.asarray(star_sampler(x, per_x_draws, rng_star), dtype=float)
        dists[k] = empirical_bw(hat, star)
        if pool_sum is None:
            pool_sum = np.zeros(star.shape[1])
            pool_sq = np.zeros(star.shape[1])
        pool_sum += star.sum(axis=0)
        pool_sq += np.sum(star * star, axis=0)
        n_pool += star.shape[0]
    mean = pool_sum / n_pool
    total_var = float(np.sum(pool_sq / n_pool - mean * mean)) * n_pool / (n_pool - 1)
    if total_var < 1e-12:
        raise ValidationError("target variance is degenerate")
    return float(100.0 * dists.mean() / (0.5 * total_var))


def median_bandwidth(a: np.ndarray, b: np.ndarray, max_pairs: int = 2000, seed: int = 0) -> float:
    """Median pairwise distance of the pooled set over up to ``max_pairs`` random pairs."""
    z = _canonical(np.vstack([a, b]))
    n = z.shape[0]
    rng = np.random.default_rng([seed, 31337])
    total = n * (n - 1) // 2
    if total <= max_pairs:
        i, j = np.triu_indices(n, k=1)
    else:
        i = rng.integers(0, n, size=max_pairs)
        j = (i + rng.integers(1, n, size=max_pairs)) % n
    dist = np.sqrt(np.sum((z[i] - z[j]) ** 2, axis=1))
    h = float(np.median(dist))
    return h if h > 0 else 1.0


def _kernel_block(x, y, gamma, dtype):
    xx = np.sum(x * x, axis=1)[:, None]
    yy = np.sum(y * y, axis=1)[None, :]
    d2 = np.maximum(xx + yy - 2.0 * (x @ y.T), 0.0)
    return np.exp(-gamma * d2).astype(dtype, copy=False)


def _u_statistic(saa, sbb, sab, na, nb) -> float:
    return float(saa / (na * (na - 1)) + sbb / (nb * (nb - 1)) - 2.0 * sab / (na * nb))


@dataclass(frozen=True)
class MmdResult:
    value: float
    raw: float
    clamped: bool
    bandwidth: float


def mmd_rbf_details(a, b, bandwidth: float | str = "median", block: int = 2048) -> MmdResult:
    a, b = _pair(a, b)
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise ValidationError("MMD needs at least two points per set")
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    gamma = 1.0 / (2.0 * h * h)

    def total(x, y):
        s = 0.0
        for i in range(0, x.shape[0], block):
            s += float(_kernel_block(x[i : i + block], y, gamma, np.float64).sum())
        return s

    saa = total(a, a) - na
    sbb = total(b, b) - nb
    sab = total(a, b)
    raw = _u_statistic(saa, sbb, sab, na, nb)
    return MmdResult(max(raw, 0.0), raw, raw < 0, h)


def mmd_rbf(a, b, bandwidth: float | str = "median") -> float:
    """Unbiased squared MMD with a Gaussian kernel, clamped at zero.

    The kernel is ``exp(-|x - y|^2 / (2 h^2))`` with ``h`` the median-heuristic
    bandwidth unless a fixed value is given.
    """
    return mmd_rbf_details(a, b, bandwidth).value


@dataclass(frozen=True)
class PermutationTest:
    statistic: float
    p_value: float
    null_quantile_95: float
    bandwidth: float
    num_permutations: int

    @property
    def passed(self) -> bool:
        """True when the same-distribution hypothesis is not rejected at level 0.05."""
        return self.p_value > 0.05


def mmd_permutation_test(
    a, b, num_permutations: int = 200, seed: int = 0, bandwidth: float | str = "median", block: int = 1024
) -> PermutationTest:
    """Two-sample permutation test on the unbiased squared MMD.

    All permutations are evaluated in one streaming pass over row blocks of
    the pooled kernel matrix, so memory stays ``O(block * n)``.
    """
    a, b = _pair(a, b)
    na, nb = a.shape[0], b.shape[0]
    if na < 2 or nb < 2:
        raise ValidationError("MMD needs at least two points per set")
    a, b = _canonical(a), _canonical(b)
    z = np.vstack([a, b])
    n = na + nb
    h = median_bandwidth(a, b) if bandwidth == "median" else float(bandwidth)
    gamma = 1.0 / (2.0 * h * h)
    rng = np.random.default_rng([seed, 2718])
    labels = np.zeros((n, num_permutations + 1), dtype=np.float32)
    labels[:na, 0] = 1.0
    for p in range(1, num_permutations + 1):
        labels[rng.permutation(n)[:na], p] = 1.0
    ka = np.empty((n, num_permutations + 1), dtype=np.float64)
    k1 = np.empty(n, dtype=np.float64)
    for i in range(0, n, block):
        kb = _kernel_block(z[i : i + block], z, gamma, np.float32)
        ka[i : i + block] = kb @ labels
        k1[i : i + block] = kb.sum(axis=1, dtype=np.float64)
    lab = labels.astype(np.float64)
    aka = np.sum(lab * ka, axis=0)  # a^T K a
    akb_all = lab.T @ k1  # a^T K 1
    akb = akb_all - aka  # a^T K b
    ones_k_ones = k1.sum()
    bkb = ones_k_ones - 2.0 * akb_all + aka
    stats = (aka - na) / (na * (na - 1)) + (bkb - nb) / (nb * (nb - 1)) - 2.0 * akb / (na * nb)
    obs = float(stats[0])
    null = stats[1:]
    p_value = (1.0 + np.sum(null >= obs)) / (1.0 + num_permutations)
    return PermutationTest(max(obs, 0.0), float(p_value), float(np.quantile(null, 0.95)), h, num_permutations)


def sliced_w2(a, b, projections: int = 100, seed: int = 0) -> float:
    """Mean squared 1-D Wasserstein distance over random unit directions.

    Equal-size sets use the sorted coupling exactly; otherwise both sorted
    projections are evaluated at the common quantile levels ``(k + 1/2) / n``.
    """
    if projections < 1:
        raise ValidationError("projections must be >= 1")
    a, b = _pair(a, b)
    d = a.shape[1]
    rng = np.random.default_rng(seed)
    if d == 1 and projections == 1:
        dirs = np.ones((1, 1))
    else:
        dirs = rng.standard_normal((projections, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        n = max(pa.shape[0], pb.shape[0])
        q = (np.arange(n) + 0.5) / n
        pa = _quantiles(pa, q)
        pb = _quantiles(pb, q)
    return float(np.mean(np.mean((pa - pb) ** 2, axis=0)))


def _quantiles(sorted_proj: np.ndarray, q: np.ndarray) -> np.ndarray:
    n = sorted_proj.shape[0]
    idx = np.minimum((q * n).astype(int), n - 1)
    return sorted_proj[idx]


@dataclass(frozen=True)
class DiscretePlan:
    rows: np.ndarray
    cols: np.ndarray
    mass: np.ndarray


def discrete_ot(a, b, max_n: int = 2000) -> tuple[float, DiscretePlan]:
    """Exact squared-Euclidean optimal transport between uniform empirical measures.

    Equal-size inputs are solved as an assignment problem (an optimal vertex
    of the same transportation LP); other sizes use the transportation
    simplex.
    """
    a, b = _pair(a, b)
    na, nb = a.shape[0], b.shape[0]
    if na > max_n or nb > max_n:
        raise ValidationError(f"sample sizes {na}, {nb} exceed max_n={max_n}")
    costs = np.sum(a * a, axis=1)[:, None] + np.sum(b * b, axis=1)[None, :] - 2.0 * (a @ b.T)
    costs = np.maximum(costs, 0.0)
    if na == nb:
        rows, cols = linear_sum_assignment(costs)
        mass = np.full(na, 1.0 / na)
    else:
        plan = solve_transport_lp(costs, np.full(na, 1.0 / na), np.full(nb, 1.0 / nb))
        rows, cols, mass = plan.rows, plan.cols, plan.lam
    return float(np.sum(mass * costs[rows, cols])), DiscretePlan(rows, cols, mass)
