import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_gaussian
from gmmflow.bridge import (
    BridgeModel,
    IntegratorConfig,
    _mixture_eval,
    _pair_state,
    build_bridge,
    cost_matrix,
    flow_marginal,
    integrate,
    mixture_drift,
    optimality_gap_mc,
    transport_cost_mc,
)
from gmmflow.errors import IntegrationDiverged, ValidationError
from gmmflow.gaussian import Gaussian, bw_distance_sq, gsb_cost
from gmmflow.gmm import Gmm, gmm_sample
from gmmflow.metrics import mmd_permutation_test
from gmmflow.toys import random_gmm, ring_toy


def single(g: Gaussian) -> Gmm:
    return Gmm.from_components(np.ones(1), [g])


def two_blobs(sep: float, eps: float = 0.0) -> BridgeModel:
    """Two equal-weight pairs moving in parallel, far apart along the first axis."""
    cov = 0.1 * np.eye(2)
    g0 = Gmm(np.full(2, 0.5), np.array([[0.0, 0.0], [sep, 0.0]]), np.stack([cov, cov]))
    g1 = Gmm(np.full(2, 0.5), np.array([[0.0, 1.0], [sep, 1.0]]), np.stack([cov, cov]))
    return build_bridge(g0, g1, eps)


# -- cost matrix ---------------------------------------------------------------------


def test_cost_matrix_single_self_zero():
    g = single(Gaussian(np.zeros(2), np.eye(2)))
    np.testing.assert_allclose(cost_matrix(g, g, 0.0), [[0.0]], atol=1e-12)


def test_cost_matrix_ring_toy():
    gmm0, gmm1 = ring_toy()
    np.testing.assert_allclose(cost_matrix(gmm0, gmm1, 0.0), np.full((1, 8), 100.0), atol=1e-9)


@pytest.mark.parametrize("eps", [0.0, 0.1, 2.0])
def test_cost_matrix_matches_pairwise_costs(eps):
    rng = np.random.default_rng(7)
    gmm0, gmm1 = random_gmm(rng, 3, 3), random_gmm(rng, 3, 4)
    got = cost_matrix(gmm0, gmm1, eps, workers=2)
    for i in range(3):
        for j in range(4):
            a, b = gmm0.component(i), gmm1.component(j)
            ref = bw_distance_sq(a, b) if eps == 0 else gsb_cost(a, b, eps)
            assert got[i, j] == pytest.approx(ref, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize("eps", [0.0, 0.5])
def test_cost_matrix_diag_matches_full(eps):
    rng = np.random.default_rng(3)
    g0, g1 = random_gmm(rng, 4, 2, diag=True), random_gmm(rng, 4, 3, diag=True)

    def as_full(g):
        return Gmm(g.weights, g.means, np.stack([np.diag(c) for c in g.covs]))

    np.testing.assert_allclose(cost_matrix(g0, g1, eps), cost_matrix(as_full(g0), as_full(g1), eps), rtol=1e-9)


def test_cost_matrix_dimension_mismatch():
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        cost_matrix(random_gmm(rng, 2, 2), random_gmm(rng, 3, 2), 0.0)


# -- build ---------------------------------------------------------------------------


def test_identical_single_components():
    g = single(Gaussian(np.array([1.0, 2.0]), np.diag([1.0, 3.0])))
    model = build_bridge(g, g, 0.0)
    assert model.plan.to_list() == [{"i": 0, "j": 0, "lambda": 1.0}]
    assert model.j_ot == pytest.approx(0.0, abs=1e-12)


def test_ring_toy_analytic_cost():
    model = build_bridge(*ring_toy(), 0.0)
    assert model.j_ot == pytest.approx(100.0, abs=1e-9)
    assert len(model.policies) == 8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.1, 1.0]), st.integers(1, 5), st.integers(1, 5))
def test_plan_feasible_and_consistent(seed, eps, k0, k1):
    rng = np.random.default_rng(seed)
    gmm0, gmm1 = random_gmm(rng, 2, k0), random_gmm(rng, 2, k1)
    model = build_bridge(gmm0, gmm1, eps)
    dense = model.plan.dense()
    np.testing.assert_allclose(dense.sum(axis=1), gmm0.weights, atol=1e-9)
    np.testing.assert_allclose(dense.sum(axis=0), gmm1.weights, atol=1e-9)
    assert np.all(model.plan.lam > 0)
    assert len(model.plan) <= k0 + k1 - 1
    assert len(model.policies) == len(model.plan)
    costs = cost_matrix(gmm0, gmm1, eps)
    assert model.j_ot == pytest.approx(float(np.sum(dense * costs)), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(-50.0, 50.0))
def test_objective_shifts_with_constant(seed, shift):
    from gmmflow.transport import solve_transport_lp

    rng = np.random.default_rng(seed)
    gmm0, gmm1 = random_gmm(rng, 2, 3), random_gmm(rng, 2, 4)
    costs = cost_matrix(gmm0, gmm1, 0.0)
    base = solve_transport_lp(costs, gmm0.weights, gmm1.weights)
    moved = solve_transport_lp(costs + shift, gmm0.weights, gmm1.weights)
    assert moved.objective == pytest.approx(base.objective + shift, abs=1e-8)


def test_permuting_source_components():
    rng = np.random.default_rng(11)
    gmm0, gmm1 = random_gmm(rng, 2, 4), random_gmm(rng, 2, 3)
    perm = np.array([2, 0, 3, 1])
    permuted = Gmm(gmm0.weights[perm], gmm0.means[perm], gmm0.covs[perm])
    a, b = build_bridge(gmm0, gmm1, 0.2), build_bridge(permuted, gmm1, 0.2)
    assert b.j_ot == pytest.approx(a.j_ot, rel=1e-12)
    np.testing.assert_allclose(b.plan.dense(), a.plan.dense()[perm], atol=1e-12)
    x = rng.normal(scale=3.0, size=(50, 2))
    for t in (0.0, 0.4, 0.9):
        np.testing.assert_allclose(mixture_drift(b, t, x), mixture_drift(a, t, x), rtol=1e-9, atol=1e-9)


def test_serialization_round_trip():
    rng = np.random.default_rng(5)
    model = build_bridge(random_gmm(rng, 3, 3), random_gmm(rng, 3, 2), 0.3)
    back = BridgeModel.from_dict(json.loads(json.dumps(model.to_dict())))
    assert back.j_ot == model.j_ot
    x = rng.normal(size=(20, 3))
    np.testing.assert_allclose(mixture_drift(back, 0.37, x), mixture_drift(model, 0.37, x), rtol=1e-12)


def test_malformed_document():
    with pytest.raises(ValidationError):
        BridgeModel.from_dict({"eps": 0.1})


# -- mixture drift ---------------------------------------------------------------------


@pytest.mark.parametrize("eps", [0.0, 0.5])
def test_single_pair_drift_is_conditional_drift(rng, eps):
    g0, g1 = random_gaussian(rng, 3), random_gaussian(rng, 3)
    model = build_bridge(single(g0), single(g1), eps)
    pol = model.policies[0]
    x = rng.normal(size=(10, 3))
    for t in (0.0, 0.3, 0.99):
        np.testing.assert_allclose(mixture_drift(model, t, x), pol.drift(t, x), rtol=1e-9, atol=1e-9)


def test_drift_at_separated_pair_mean():
    model = two_blobs(sep=50.0, eps=0.1)
    t = 0.4
    for p in model.policies:
        x = p.mean(t)
        np.testing.assert_allclose(mixture_drift(model, t, x), p.drift(t, x), atol=1e-6)


def test_mirror_symmetry():
    # pairs mirrored across the x-axis: drift on the axis has no y component
    cov = 0.5 * np.eye(2)
    g0 = Gmm(np.full(2, 0.5), np.array([[0.0, 1.0], [0.0, -1.0]]), np.stack([cov, cov]))
    g1 = Gmm(np.full(2, 0.5), np.array([[4.0, 3.0], [4.0, -3.0]]), np.stack([cov, cov]))
    model = build_bridge(g0, g1, 0.2)
    x = np.column_stack([np.linspace(-3, 6, 9), np.zeros(9)])
    for t in (0.0, 0.5, 0.9):
        np.testing.assert_allclose(mixture_drift(model, t, x)[:, 1], 0.0, atol=1e-10)


def test_underflow_falls_back_to_nearest_pair():
    model = two_blobs(sep=10.0)
    x = np.array([1e4, 0.0])
    out = mixture_drift(model, 0.5, x)
    assert np.all(np.isfinite(out))
    near = max(model.policies, key=lambda p: p.mean(0.5)[0])
    np.testing.assert_allclose(out, near.drift(0.5, x), rtol=1e-12)


@pytest.mark.parametrize("diag", [False, True])
def test_compiled_and_numpy_routes_agree(diag):
    rng = np.random.default_rng(8)
    model = build_bridge(random_gmm(rng, 4, 3, diag=diag), random_gmm(rng, 4, 3, diag=diag), 0.3)
    assert model.is_diag == diag
    x = rng.normal(scale=4.0, size=(64, 4))
    ps = _pair_state(model, 0.6)
    np.testing.assert_allclose(_mixture_eval(x, ps, use_jit=True), _mixture_eval(x, ps, use_jit=False), rtol=1e-10, atol=1e-10)


def test_drift_time_validation():
    model = two_blobs(5.0)
    with pytest.raises(ValidationError):
        mixture_drift(model, 1.5, np.zeros(2))


# -- flow marginals ---------------------------------------------------------------------


def _aggregate(model, t, side):
    marg = flow_marginal(model, t)
    idx = model.plan.rows if side == 0 else model.plan.cols
    ref = model.gmm0 if side == 0 else model.gmm1
    for k in range(ref.num_components):
        sel = idx == k
        assert marg.weights[sel].sum() == pytest.approx(ref.weights[k], abs=1e-9)
        for c in np.flatnonzero(sel):
            np.testing.assert_array_equal(marg.means[c], ref.means[k])
            np.testing.assert_array_equal(marg.covs[c], ref.covs[k])


@pytest.mark.parametrize("t,side", [(0.0, 0), (1.0, 1)])
def test_flow_marginal_endpoints(t, side):
    rng = np.random.default_rng(2)
    model = build_bridge(random_gmm(rng, 2, 3), random_gmm(rng, 2, 4), 0.5)
    _aggregate(model, t, side)


def test_flow_marginal_ring_midpoint():
    model = build_bridge(*ring_toy(), 0.0)
    marg = flow_marginal(model, 0.5)
    np.testing.assert_allclose(np.linalg.norm(marg.means, axis=1), 5.0, atol=1e-12)


# -- integration -------------------------------------------------------------------------


def test_zero_drift_constant_trajectories(rng):
    g = single(Gaussian(np.zeros(2), np.eye(2)))
    model = build_bridge(g, g, 0.0)
    x0 = rng.normal(size=(20, 2))
    traj = integrate(model, x0, IntegratorConfig(dt=0.01))
    assert traj.states.shape == (101, 20, 2)
    np.testing.assert_allclose(traj.states, np.broadcast_to(x0, traj.states.shape), atol=1e-12)


def test_single_pair_hits_target_moments(rng):
    g0 = Gaussian(np.array([0.0, 1.0]), np.array([[1.0, 0.3], [0.3, 0.5]]))
    g1 = Gaussian(np.array([3.0, -2.0]), np.array([[0.4, -0.1], [-0.1, 2.0]]))
    model = build_bridge(single(g0), single(g1), 0.0)
    n = 10_000
    x1 = integrate(model, gmm_sample(model.gmm0, n, seed=2), IntegratorConfig(dt=1e-3)).final
    se_mean = np.sqrt(np.diag(g1.cov) / n)
    assert np.all(np.abs(x1.mean(axis=0) - g1.mean) < 3 * se_mean)
    cov = np.cov(x1, rowvar=False)
    # standard error of a sample covariance entry: sqrt((s_ii s_jj + s_ij^2) / n)
    se_cov = np.sqrt((np.outer(np.diag(g1.cov), np.diag(g1.cov)) + g1.cov**2) / n)
    assert np.all(np.abs(cov - g1.cov) < 3 * se_cov)


def test_ring_toy_stochastic_terminal_law():
    model = build_bridge(*ring_toy(), 0.1)
    n = 4000
    x0 = gmm_sample(model.gmm0, n, seed=3)
    x1 = integrate(model, x0, IntegratorConfig(dt=1e-3, seed=4)).final
    fresh = gmm_sample(model.gmm1, n, seed=5)
    res = mmd_permutation_test(x1, fresh, num_permutations=200, seed=0)
    assert res.statistic <= res.null_quantile_95


def test_ring_toy_cluster_purity():
    model = build_bridge(*ring_toy(), 0.0)
    x1 = integrate(model, gmm_sample(model.gmm0, 2000, seed=0), IntegratorConfig()).final
    d2 = np.sum((x1[:, None] - model.gmm1.means[None]) ** 2, axis=2)
    nearest = np.sqrt(d2.min(axis=1))
    assert np.mean(nearest < 3.0) > 0.99
    assert len(np.unique(d2.argmin(axis=1))) == 8


def test_integration_reproducible():
    model = build_bridge(*ring_toy(), 0.5)
    x0 = gmm_sample(model.gmm0, 300, seed=0)
    cfg = IntegratorConfig(dt=1e-2, seed=9, record_every=10)
    a, b = integrate(model, x0, cfg), integrate(model, x0, cfg)
    np.testing.assert_array_equal(a.states, b.states)
    assert a.times.tolist() == pytest.approx(np.linspace(0, 1, 11).tolist())
    c = integrate(model, x0, IntegratorConfig(dt=1e-2, seed=10, record_every=10))
    assert not np.array_equal(a.final, c.final)


@pytest.mark.parametrize("scheme", ["euler", "rk4"])
def test_single_pair_follows_monge_map(rng, scheme):
    g0 = Gaussian(np.zeros(2), np.eye(2))
    g1 = Gaussian(np.array([2.0, 0.0]), np.diag([4.0, 0.25]))
    model = build_bridge(single(g0), single(g1), 0.0)
    x0 = rng.normal(size=(50, 2))
    # deterministic pair paths are straight lines to the Monge image m1 + diag(2, 0.5) x
    exact = g1.mean + x0 * np.array([2.0, 0.5])
    x1 = integrate(model, x0, IntegratorConfig(dt=0.05, scheme=scheme)).final
    np.testing.assert_allclose(x1, exact, atol=1e-10)


def test_rk4_more_accurate_than_euler_on_mixture():
    model = build_bridge(*ring_toy(num_modes=3, radius=3.0, var=1.0), 0.0)
    x0 = gmm_sample(model.gmm0, 200, seed=0)
    ref = integrate(model, x0, IntegratorConfig(dt=1e-4, scheme="rk4")).final
    err = {
        scheme: np.max(np.abs(integrate(model, x0, IntegratorConfig(dt=0.02, scheme=scheme)).final - ref))
        for scheme in ("euler", "rk4")
    }
    assert err["rk4"] < 0.1 * err["euler"]


def test_divergence_reports_step():
    model = build_bridge(*ring_toy(), 0.0)
    with pytest.raises(IntegrationDiverged) as info:
        integrate(model, np.array([[1e306, 1e306]]), IntegratorConfig(dt=0.1))
    assert info.value.step >= 1


def test_integrate_validation():
    model = build_bridge(*ring_toy(), 0.0)
    with pytest.raises(ValidationError):
        integrate(model, np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        integrate(model, np.zeros((3, 2)), IntegratorConfig(dt=-1.0))
    with pytest.raises(ValidationError):
        integrate(model, np.zeros((3, 2)), IntegratorConfig(scheme="heun"))


# -- costs and the optimality gap ------------------------------------------------------------


def test_zero_drift_cost_is_zero():
    g = single(Gaussian(np.zeros(2), np.eye(2)))
    mean, se = transport_cost_mc(build_bridge(g, g, 0.0), 200)
    assert mean == pytest.approx(0.0, abs=1e-12) and se == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.5])
def test_single_pair_cost_matches_closed_form(rng, eps):
    g0, g1 = random_gaussian(rng, 2), random_gaussian(rng, 2)
    model = build_bridge(single(g0), single(g1), eps)
    mean, se = transport_cost_mc(model, 10_000, IntegratorConfig(dt=1e-3, seed=1))
    assert abs(mean - gsb_cost(g0, g1, eps)) < 3 * se + 1e-2 * (eps == 0)


def test_ring_toy_cost_between_ot_and_bound():
    model = build_bridge(*ring_toy(), 0.0)
    mean, se = transport_cost_mc(model, 10_000)
    assert 84.0 <= mean <= 100.06 + 3 * se
    assert mean == pytest.approx(89.45, abs=2.0)


def test_single_pair_gap_is_zero(rng):
    model = build_bridge(single(random_gaussian(rng, 2)), single(random_gaussian(rng, 2)), 0.3)
    mean, _ = optimality_gap_mc(model, 500)
    assert mean == pytest.approx(0.0, abs=1e-18)


def test_separated_pairs_gap_vanishes():
    # means 50 sigma apart (sigma = sqrt(0.1))
    model = two_blobs(sep=50.0 * np.sqrt(0.1), eps=0.0)
    mean, _ = optimality_gap_mc(model, 5000)
    assert 0.0 <= mean < 1e-6


@pytest.mark.parametrize("eps", [0.0, 1.0])
def test_gap_identity_ring_toy(eps):
    model = build_bridge(*ring_toy(), eps)
    cost, se_c = transport_cost_mc(model, 10_000, IntegratorConfig(dt=1e-3, seed=2))
    gap, se_g = optimality_gap_mc(model, 100_000, seed=3)
    assert abs(model.j_ot - gap - cost) <= 3 * np.hypot(se_c, se_g)
    assert cost <= model.j_ot + 3 * se_c


def test_cost_mc_needs_particles():
    with pytest.raises(ValidationError):
        transport_cost_mc(build_bridge(*ring_toy(), 0.0), 10)
    with pytest.raises(ValidationError):
        optimality_gap_mc(build_bridge(*ring_toy(), 0.0), 10)
