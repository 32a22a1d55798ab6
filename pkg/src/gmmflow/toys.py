"""Small reference problems used by tests, benchmarks and the CLI."""

from __future__ import annotations

import numpy as np

from .gmm import Gmm


def ring_toy(radius: float = 10.0, num_modes: int = 8, var: float = 0.4) -> tuple[Gmm, Gmm]:
    """Centered Gaussian spreading to equal-weight modes on a circle.

    Returns ``(gmm0, gmm1)``: ``N(0, var I2)`` and ``num_modes`` components
    at angles ``2 pi k / num_modes`` with the same covariance.
    """
    ang = 2.0 * np.pi * np.arange(num_modes) / num_modes
    means = radius * np.column_stack([np.cos(ang), np.sin(ang)])
    cov = var * np.eye(2)
    gmm0 = Gmm(np.ones(1), np.zeros((1, 2)), cov[None])
    gmm1 = Gmm(np.full(num_modes, 1.0 / num_modes), means, np.tile(cov, (num_modes, 1, 1)))
    return gmm0, gmm1


def random_gmm(rng: np.random.Generator, dim: int, k: int, spread: float = 4.0, diag: bool = False) -> Gmm:
    """Random mixture with Dirichlet weights and well-conditioned covariances."""
    weights = rng.dirichlet(np.full(k, 2.0))
    means = rng.normal(scale=spread, size=(k, dim))
    if diag:
        return Gmm(weights, means, rng.uniform(0.3, 1.5, size=(k, dim)), cov_type="diag")
    covs = np.empty((k, dim, dim))
    for c in range(k):
        q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        w = rng.uniform(0.3, 1.5, size=dim)
        covs[c] = (q * w) @ q.T
        covs[c] = 0.5 * (covs[c] + covs[c].T)
    return Gmm(weights, means, covs)


def desk_instance(
    num_marginals: int = 5, num_components: int = 5, dim: int = 2, seed: int = 0
) -> list[Gmm]:
    """Mixtures whose modes drift along smooth random curves between snapshots.

    Mode ``c`` of snapshot ``j`` sits near ``p_c + j w_c`` plus a small
    perturbation, so neighbouring snapshots look alike, as in a time series
    of cell populations. Weights and covariances vary per snapshot.
    """
    rng = np.random.default_rng(seed)
    base = rng.normal(scale=4.0, size=(num_components, dim))
    drift = rng.normal(scale=1.5, size=(num_components, dim))
    out = []
    for j in range(num_marginals):
        means = base + j * drift + rng.normal(scale=0.5, size=(num_components, dim))
        weights = rng.dirichlet(np.full(num_components, 5.0))
        covs = np.empty((num_components, dim, dim))
        for c in range(num_components):
            q, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
            covs[c] = (q * rng.uniform(0.2, 0.8, size=dim)) @ q.T
            covs[c] = 0.5 * (covs[c] + covs[c].T)
        out.append(Gmm(weights, means, covs))
    return out
