import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gaussian, random_spd
from gmmflow.errors import NotPsdError, ValidationError
from gmmflow.gaussian import (
    Gaussian,
    bw_distance_sq,
    energy_offset,
    gsb_cost,
    gsb_cost_reduced,
    gsb_marginal,
    gsb_policy,
    sqrtm_spd,
)


def _gauss_legendre(f, n=400):
    x, w = np.polynomial.legendre.leggauss(n)
    t = 0.5 * (x + 1.0)
    return 0.5 * sum(wi * f(ti) for ti, wi in zip(t, w))


def _energy_by_quadrature(p):
    # E|u|^2 = tr(K Sigma K^T) + |v|^2 under the bridge marginal at each t
    def integrand(t):
        k = p.gain(t)
        return float(np.trace(k @ p.cov(t) @ k.T) + p.velocity @ p.velocity)

    return _gauss_legendre(integrand)


class TestSqrtm:
    def test_identity(self):
        np.testing.assert_array_equal(sqrtm_spd(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        np.testing.assert_allclose(sqrtm_spd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)

    def test_random_reconstructs(self, rng):
        a = random_spd(rng, 5)
        s = sqrtm_spd(a)
        assert np.linalg.norm(s @ s - a) / np.linalg.norm(a) < 1e-10
        np.testing.assert_array_equal(s, s.T)

    def test_small_negative_clamped(self):
        s = sqrtm_spd(np.diag([1.0, -1e-12]))
        np.testing.assert_allclose(s, np.diag([1.0, 0.0]))

    def test_rejects_non_symmetric(self):
        with pytest.raises(ValidationError):
            sqrtm_spd(np.array([[1.0, 0.5], [0.0, 1.0]]))

    def test_rejects_indefinite(self):
        with pytest.raises(NotPsdError):
            sqrtm_spd(np.diag([1.0, -1e-3]))


class TestBuresWasserstein:
    def test_identical_is_zero(self, rng):
        g = random_gaussian(rng, 4)
        assert bw_distance_sq(g, g) == pytest.approx(0.0, abs=1e-10)

    @pytest.mark.parametrize("m,s0,s1", [(0.0, 1.0, 2.0), (3.0, 0.5, 0.5), (-1.5, 2.0, 0.1)])
    def test_scalar_closed_form(self, m, s0, s1):
        g0 = Gaussian([0.0], [[s0**2]])
        g1 = Gaussian([m], [[s1**2]])
        assert bw_distance_sq(g0, g1) == pytest.approx(m**2 + (s0 - s1) ** 2, rel=1e-12, abs=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(ValidationError):
            bw_distance_sq(Gaussian([0.0], [[1.0]]), Gaussian([0.0, 0.0], np.eye(2)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), d=st.integers(1, 6))
    def test_symmetric_and_nonnegative(self, seed, d):
        r = np.random.default_rng(seed)
        g0, g1 = random_gaussian(r, d), random_gaussian(r, d)
        a, b = bw_distance_sq(g0, g1), bw_distance_sq(g1, g0)
        assert a >= -1e-10
        assert a == pytest.approx(b, rel=1e-10, abs=1e-10)

    def test_diagonal_path_matches_full(self, rng):
        a, b = rng.uniform(0.1, 3.0, 6), rng.uniform(0.1, 3.0, 6)
        m0, m1 = rng.normal(size=6), rng.normal(size=6)
        diag = bw_distance_sq(Gaussian(m0, a), Gaussian(m1, b))
        full = bw_distance_sq(Gaussian(m0, np.diag(a)), Gaussian(m1, np.diag(b)))
        assert diag == pytest.approx(full, rel=1e-12)


class TestGsbCost:
    def test_zero_eps_is_bw(self, rng):
        g0, g1 = random_gaussian(rng, 3), random_gaussian(rng, 3)
        assert gsb_cost(g0, g1, 0.0) == bw_distance_sq(g0, g1)

    def test_negative_eps(self, rng):
        g = random_gaussian(rng, 2)
        with pytest.raises(ValidationError):
            gsb_cost(g, g, -0.1)

    def test_small_eps_matches_bw(self):
        r = np.random.default_rng(7)
        for _ in range(20):
            g0, g1 = random_gaussian(r, 3), random_gaussian(r, 3)
            bw = bw_distance_sq(g0, g1)
            assert abs(gsb_cost(g0, g1, 1e-4) - bw) / bw < 1e-3

    def test_gap_to_bw_decreases_with_eps(self, rng):
        g0, g1 = random_gaussian(rng, 3), random_gaussian(rng, 3)
        bw = bw_distance_sq(g0, g1)
        gaps = [abs(gsb_cost(g0, g1, e) - bw) for e in (1e-2, 1e-3, 1e-4)]
        assert gaps[0] > gaps[1] > gaps[2]

    @pytest.mark.parametrize("eps", [0.05, 0.5, 1.0, 4.0])
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_equals_policy_energy_by_quadrature(self, eps, d):
        r = np.random.default_rng(100 + d)
        g0, g1 = random_gaussian(r, d), random_gaussian(r, d)
        p = gsb_policy(g0, g1, eps)
        assert gsb_cost(g0, g1, eps) == pytest.approx(_energy_by_quadrature(p), rel=1e-8)

    def test_reduced_cost_formula(self, rng):
        # direct evaluation with the non-symmetric matrix product
        g0, g1 = random_gaussian(rng, 3), random_gaussian(rng, 3)
        eps = 0.7
        inner = np.eye(3) + (4.0 / eps**2) * g0.cov @ g1.cov
        w, v = np.linalg.eig(inner)
        root = (v * np.sqrt(w)) @ np.linalg.inv(v)
        m = np.real(np.eye(3) + root)
        expected = (
            np.sum((g1.mean - g0.mean) ** 2)
            + np.trace(g0.cov)
            + np.trace(g1.cov)
            - eps * (np.trace(m) - np.linalg.slogdet(m)[1] + np.linalg.slogdet(g1.cov)[1])
        )
        assert gsb_cost_reduced(g0, g1, eps) == pytest.approx(expected, rel=1e-10)
        assert gsb_cost(g0, g1, eps) - gsb_cost_reduced(g0, g1, eps) == pytest.approx(
            energy_offset(eps, 3), rel=1e-10
        )

    def test_identity_pair_value(self):
        g = Gaussian(np.zeros(2), np.eye(2))
        # energy of the stationary unit bridge with eps = 1 is finite and positive
        assert gsb_cost(g, g, 1.0) == pytest.approx(_energy_by_quadrature(gsb_policy(g, g, 1.0)), rel=1e-9)


class TestGsbPolicy:
    def test_stationary_bridge_zero_drift(self):
        g = Gaussian(np.zeros(3), np.eye(3))
        p = gsb_policy(g, g, 0.0)
        for t in (0.0, 0.3, 0.9):
            np.testing.assert_allclose(p.gain(t), np.zeros((3, 3)), atol=1e-14)
        np.testing.assert_array_equal(p.velocity, np.zeros(3))

    def test_pure_translation(self, rng):
        cov = random_spd(rng, 2)
        m = np.array([1.0, -2.0])
        p = gsb_policy(Gaussian(np.zeros(2), cov), Gaussian(m, cov), 0.0)
        for t in (0.1, 0.5, 0.99):
            np.testing.assert_allclose(p.gain(t), 0.0, atol=1e-12)
            np.testing.assert_allclose(p.drift(t, rng.normal(size=(4, 2))), np.tile(m, (4, 1)), atol=1e-12)

    def test_boundary_exactness(self, rng):
        g0, g1 = random_gaussian(rng, 3), random_gaussian(rng, 3)
        p = gsb_policy(g0, g1, 0.3)
        assert gsb_marginal(p, 0.0) is p.g0
        assert gsb_marginal(p, 1.0) is p.g1
        np.testing.assert_allclose(p.cov(0.0), g0.cov, atol=1e-12)
        np.testing.assert_allclose(p.cov(1.0), g1.cov, atol=1e-12)

    def test_midpoint_isotropic(self):
        s2 = 0.7
        g0 = Gaussian(np.array([0.0, 0.0]), s2 * np.eye(2))
        g1 = Gaussian(np.array([2.0, 4.0]), s2 * np.eye(2))
        m = gsb_marginal(gsb_policy(g0, g1, 0.0), 0.5)
        np.testing.assert_allclose(m.cov, s2 * np.eye(2), atol=1e-12)
        np.testing.assert_allclose(m.mean, [1.0, 2.0])

    def test_time_out_of_range(self, rng):
        p = gsb_policy(random_gaussian(rng, 2), random_gaussian(rng, 2), 0.1)
        with pytest.raises(ValidationError):
            gsb_marginal(p, 1.5)

    def test_moment_ode_reaches_terminal_law(self):
        r = np.random.default_rng(3)
        g0, g1 = random_gaussian(r, 2), random_gaussian(r, 2)
        eps = 0.5
        p = gsb_policy(g0, g1, eps)

        def rhs(t, mean, cov):
            k = p.gain(t)
            dmean = k @ (mean - p.mean(t)) + p.velocity
            dcov = k @ cov + cov @ k.T + eps * np.eye(2)
            return dmean, dcov

        mean, cov = g0.mean.copy(), g0.cov.copy()
        n = 10_000
        h = 1.0 / n
        for i in range(n):
            t = i * h
            a1, b1 = rhs(t, mean, cov)
            a2, b2 = rhs(t + h / 2, mean + h / 2 * a1, cov + h / 2 * b1)
            a3, b3 = rhs(t + h / 2, mean + h / 2 * a2, cov + h / 2 * b2)
            a4, b4 = rhs(t + h, mean + h * a3, cov + h * b3)
            mean = mean + h / 6 * (a1 + 2 * a2 + 2 * a3 + a4)
            cov = cov + h / 6 * (b1 + 2 * b2 + 2 * b3 + b4)
        np.testing.assert_allclose(mean, g1.mean, atol=1e-6)
        np.testing.assert_allclose(cov, g1.cov, atol=1e-6)

    @pytest.mark.parametrize("eps", [0.0, 0.4])
    def test_fokker_planck_residual_1d(self, eps):
        g0 = Gaussian([-1.0], [[0.5]])
        g1 = Gaussian([2.0], [[1.5]])
        p = gsb_policy(g0, g1, eps)
        h = 1e-3

        def rho(t, x):
            m, v = p.mean(t)[0], p.cov(t)[0, 0]
            return np.exp(-0.5 * (x - m) ** 2 / v) / np.sqrt(2 * np.pi * v)

        def flux(t, x):
            return p.drift(t, x[:, None])[:, 0] * rho(t, x)

        worst = 0.0
        for t in np.linspace(0.05, 0.95, 10):
            x = np.linspace(p.mean(t)[0] - 4, p.mean(t)[0] + 4, 81)
            drho_dt = (rho(t + h, x) - rho(t - h, x)) / (2 * h)
            dflux_dx = (flux(t, x + h) - flux(t, x - h)) / (2 * h)
            lap = (rho(t, x + h) - 2 * rho(t, x) + rho(t, x - h)) / h**2
            resid = drho_dt + dflux_dx - 0.5 * eps * lap
            worst = max(worst, float(np.max(np.abs(resid))))
        assert worst < 1e-3

    def test_diagonal_fast_path_matches_full(self, rng):
        a, b = rng.uniform(0.2, 2.0, 4), rng.uniform(0.2, 2.0, 4)
        m0, m1 = rng.normal(size=4), rng.normal(size=4)
        pd = gsb_policy(Gaussian(m0, a), Gaussian(m1, b), 0.3)
        pf = gsb_policy(Gaussian(m0, np.diag(a)), Gaussian(m1, np.diag(b)), 0.3)
        x = rng.normal(size=(5, 4))
        for t in (0.0, 0.25, 0.8):
            np.testing.assert_allclose(pd.drift(t, x), pf.drift(t, x), atol=1e-12)
            np.testing.assert_allclose(np.diag(pd.cov(t)), pf.cov(t), atol=1e-12)
        assert gsb_cost(Gaussian(m0, a), Gaussian(m1, b), 0.3) == pytest.approx(
            gsb_cost(Gaussian(m0, np.diag(a)), Gaussian(m1, np.diag(b)), 0.3), rel=1e-12
        )
