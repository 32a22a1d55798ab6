"""Gaussian mixture models: density, sampling, EM fitting and conditioning."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import NumericalError, ValidationError
from .gaussian import COV_FLOOR, Gaussian, floor_spd

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Gmm:
    """Finite Gaussian mixture.

    Attributes
    ----------
    weights : ndarray, shape (K,)
    means : ndarray, shape (K, d)
    covs : ndarray, shape (K, d, d) for ``cov_type="full"`` or (K, d) for ``"diag"``
    """

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    cov_type: str = "full"

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.asarray(self.means, dtype=float)
        covs = np.asarray(self.covs, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        k, d = means.shape
        if k < 1 or w.shape != (k,):
            raise ValidationError("weights and means disagree on the component count")
        if self.cov_type == "full":
            if covs.ndim == 1 and d == 1:
                covs = covs[:, None, None]
            if covs.shape != (k, d, d):
                raise ValidationError(f"full covariances must have shape {(k, d, d)}")
            if np.max(np.abs(covs - covs.transpose(0, 2, 1)), initial=0.0) > 1e-10 * max(
                1.0, float(np.max(np.abs(covs)))
            ):
                raise ValidationError("component covariance is not symmetric")
        elif self.cov_type == "diag":
            if covs.shape != (k, d):
                raise ValidationError(f"diagonal covariances must have shape {(k, d)}")
            if np.any(covs < 0):
                raise ValidationError("negative variance")
        else:
            raise ValidationError(f"unknown cov_type {self.cov_type!r}")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValidationError("weights must be nonnegative and sum to 1")
        if not (np.all(np.isfinite(means)) and np.all(np.isfinite(covs))):
            raise ValidationError("non-finite mixture parameters")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covs", covs)

    @property
    def num_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def is_diag(self) -> bool:
        return self.cov_type == "diag"

    def component(self, k: int) -> Gaussian:
        return Gaussian(self.means[k], self.covs[k])

    @property
    def components(self) -> list[Gaussian]:
        return [self.component(k) for k in range(self.num_components)]

    @classmethod
    def from_components(cls, weights, components: list[Gaussian]) -> "Gmm":
        diag = all(c.is_diag for c in components)
        covs = np.stack([c.cov if diag else c.full_cov() for c in components])
        return cls(np.asarray(weights, float), np.stack([c.mean for c in components]), covs,
                   "diag" if diag else "full")

    def to_dict(self) -> dict:
        comps = []
        for k in range(self.num_components):
            comps.append({
                "weight": float(self.weights[k]),
                "mean": [float(v) for v in self.means[k]],
                "cov": [float(v) for v in self.covs[k].ravel()],
            })
        return {"dim": self.dim, "cov_type": self.cov_type, "components": comps}

    @classmethod
    def from_dict(cls, data: dict) -> "Gmm":
        try:
            d = int(data["dim"])
            cov_type = data.get("cov_type", "full")
            comps = data["components"]
            weights = np.array([c["weight"] for c in comps], dtype=float)
            means = np.array([c["mean"] for c in comps], dtype=float).reshape(len(comps), d)
            shape = (len(comps), d, d) if cov_type == "full" else (len(comps), d)
            covs = np.array([c["cov"] for c in comps], dtype=float).reshape(shape)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed GMM document: {exc}") from exc
        return cls(weights, means, covs, cov_type)


def component_logpdfs(g: Gmm, x: np.ndarray, floor: float = COV_FLOOR) -> np.ndarray:
    """Per-component log densities ``log N(x_n; mu_k, Sigma_k)``, shape (n, K)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != g.dim:
        raise ValidationError(f"points have dimension {x.shape[1]}, mixture has {g.dim}")
    n, d = x.shape
    out = np.empty((n, g.num_components))
    for k in range(g.num_components):
        dev = x - g.means[k]
        if g.is_diag:
            var = np.maximum(g.covs[k], floor)
            maha = np.sum(dev * dev / var, axis=1)
            logdet = float(np.sum(np.log(var)))
        else:
            chol = np.linalg.cholesky(floor_spd(g.covs[k], floor))
            sol = np.linalg.solve(chol, dev.T)
            maha = np.sum(sol * sol, axis=0)
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
        out[:, k] = -0.5 * (maha + logdet + d * LOG_2PI)
    return out


def gmm_logpdf(g: Gmm, x: np.ndarray) -> np.ndarray | float:
    """Log density of the mixture at one point ``(d,)`` or at rows of ``(n, d)``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    with np.errstate(divide="ignore"):
        logw = np.log(g.weights)
    vals = logsumexp(component_logpdfs(g, x) + logw, axis=1)
    return float(vals[0]) if single else vals


def _factor(c: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        # semidefinite (e.g. deterministic conditional): symmetric factor
        w, v = np.linalg.eigh(0.5 * (c + c.T))
        return v * np.sqrt(np.clip(w, 0.0, None))


def _chol_factors(g: Gmm) -> np.ndarray:
    if g.is_diag:
        return np.sqrt(np.maximum(g.covs, 0.0))
    return np.stack([_factor(c) for c in g.covs])


def gmm_sample(g: Gmm, n: int, seed=None) -> np.ndarray:
    """Draw ``n`` i.i.d. points; returns the ``(n, d)`` sample matrix."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.choice(g.num_components, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    factors = _chol_factors(g)
    if g.is_diag:
        return g.means[labels] + factors[labels] * z
    return g.means[labels] + np.einsum("nij,nj->ni", factors[labels], z)


@dataclass(frozen=True)
class EmConfig:
    """Settings for :func:`em_fit`."""

    num_components: int
    max_iters: int = 200
    tol: float = 1e-6
    num_restarts: int = 3
    seed: int | None = 0
    cov_floor: float = 1e-6
    cov_type: str = "full"

    def __post_init__(self):
        if self.num_components < 1 or self.max_iters < 1 or self.num_restarts < 1:
            raise ValidationError("EM counts must be positive")
        if self.tol <= 0 or self.cov_floor <= 0:
            raise ValidationError("EM tolerances must be positive")
        if self.cov_type not in ("full", "diag"):
            raise ValidationError(f"unknown cov_type {self.cov_type!r}")


@dataclass
class EmResult:
    """Outcome of a multi-restart EM run."""

    gmm: Gmm
    log_likelihood: float
    iterations: int
    history: list[float]
    restart_log_likelihoods: list[float]
    reinitialized: list[int] = field(default_factory=list)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.stack(centers)


def _m_step(x, resp, cfg: EmConfig, global_cov):
    nk = resp.sum(axis=0)
    n, d = x.shape
    weights = nk / n
    means = (resp.T @ x) / np.maximum(nk, 1e-300)[:, None]
    if cfg.cov_type == "diag":
        covs = np.empty((cfg.num_components, d))
    else:
        covs = np.empty((cfg.num_components, d, d))
    for k in range(cfg.num_components):
        if nk[k] <= 1e-10:
            covs[k] = np.diag(global_cov) if cfg.cov_type == "diag" else global_cov
            continue
        dev = x - means[k]
        if cfg.cov_type == "diag":
            covs[k] = np.maximum((resp[:, k] @ (dev * dev)) / nk[k], cfg.cov_floor)
        else:
            c = (dev * resp[:, k : k + 1]).T @ dev / nk[k]
            covs[k] = floor_spd(0.5 * (c + c.T), cfg.cov_floor)
    return weights, means, covs


def _single_run(x, cfg: EmConfig, rng: np.random.Generator):
    n, d = x.shape
    k = cfg.num_components
    global_cov = np.atleast_2d(np.cov(x, rowvar=False)) if n > 1 else np.eye(d)
    global_cov = floor_spd(0.5 * (global_cov + global_cov.T), cfg.cov_floor)
    centers = _kmeans_pp(x, k, rng)
    labels = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), labels] = 1.0
    weights, means, covs = _m_step(x, resp, cfg, global_cov)
    weights = np.maximum(weights, 1.0 / n)
    weights /= weights.sum()
    history: list[float] = []
    reinit: list[int] = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        g = Gmm(weights, means, covs, cfg.cov_type)
        logp = component_logpdfs(g, x, cfg.cov_floor) + np.log(np.maximum(weights, 1e-300))
        norm = logsumexp(logp, axis=1)
        ll = float(np.mean(norm))
        if not np.isfinite(ll):
            raise NumericalError("non-finite log-likelihood in EM")
        resp = np.exp(logp - norm[:, None])
        if not np.all(np.isfinite(resp)):
            raise NumericalError("NaN responsibilities in EM")
        history.append(ll)
        if len(history) > 1 and abs(history[-1] - history[-2]) <= cfg.tol * max(1.0, abs(history[-2])):
            break
        weights, means, covs = _m_step(x, resp, cfg, global_cov)
        empty = np.flatnonzero(resp.sum(axis=0) <= 1e-10)
        if empty.size:
            # restart dead components at random data points
            reinit.append(it)
            for j in empty:
                means[j] = x[rng.integers(n)]
                weights[j] = 1.0 / n
            weights /= weights.sum()
    gmm = Gmm(weights / weights.sum(), means, covs, cfg.cov_type)
    return gmm, history, it, reinit


def em_run(samples: np.ndarray, cfg: EmConfig) -> EmResult:
    """Fit a mixture by EM with k-means++ seeding and best-of-restarts selection."""
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] < cfg.num_components:
        raise ValidationError("need at least as many samples as components")
    if not np.all(np.isfinite(x)):
        raise ValidationError("samples contain non-finite entries")
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.num_restarts)
    best = None
    finals = []
    for ss in seeds:
        gmm, hist, iters, reinit = _single_run(x, cfg, np.random.default_rng(ss))
        finals.append(hist[-1])
        if best is None or hist[-1] > best.log_likelihood:
            best = EmResult(gmm, hist[-1], iters, hist, [], reinit)
    best.restart_log_likelihoods = finals
    return best


def em_fit(samples: np.ndarray, cfg: EmConfig) -> Gmm:
    """Best-likelihood EM fit over ``cfg.num_restarts`` restarts."""
    return em_run(samples, cfg).gmm


def gmm_condition(joint: Gmm, x_obs: np.ndarray) -> Gmm:
    """Conditional mixture of the trailing coordinates given the leading ones.

    The joint is over ``(x, v)`` with ``x`` the first ``len(x_obs)``
    coordinates. Conditional covariances may be singular (deterministic
    conditionals) and are returned as computed, clipped to be PSD.
    """
    x_obs = np.atleast_1d(np.asarray(x_obs, dtype=float))
    dx = x_obs.shape[0]
    d = joint.dim
    if not 0 < dx < d:
        raise ValidationError("observation must cover a strict prefix of the coordinates")
    k = joint.num_components
    dv = d - dx
    logw = np.empty(k)
    means = np.empty((k, dv))
    covs = np.empty((k, dv, dv))
    for j in range(k):
        s = joint.covs[j] if not joint.is_diag else np.diag(joint.covs[j])
        sxx, sxv, svv = s[:dx, :dx], s[:dx, dx:], s[dx:, dx:]
        try:
            chol = np.linalg.cholesky(floor_spd(sxx))
        except np.linalg.LinAlgError as exc:
            raise NumericalError("singular position covariance") from exc
        dev = x_obs - joint.means[j, :dx]
        a = np.linalg.solve(chol, dev)
        b = np.linalg.solve(chol, sxv)
        means[j] = joint.means[j, dx:] + b.T @ a
        c = svv - b.T @ b
        c = 0.5 * (c + c.T)
        w, vecs = np.linalg.eigh(c)
        covs[j] = (vecs * np.clip(w, 0.0, None)) @ vecs.T
        with np.errstate(divide="ignore"):
            logw[j] = np.log(joint.weights[j]) - 0.5 * (a @ a) - float(np.sum(np.log(np.diag(chol))))
    logw -= logsumexp(logw)
    w = np.exp(logw)
    return Gmm(w / w.sum(), means, covs, "full")
