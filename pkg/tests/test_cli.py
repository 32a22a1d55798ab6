import json
import subprocess
import sys
import time

import numpy as np
import pytest

from gmmflow import cli
from gmmflow.bridge import BridgeModel
from gmmflow.errors import InfeasibleError, NumericalError, ValidationError
from gmmflow.gaussian import Gaussian, bw_distance_sq
from gmmflow.gmm import EmConfig, Gmm, em_run, gmm_logpdf, gmm_sample
from gmmflow.io import read_json, read_points_csv, read_trajectory_csv, write_json, write_points_csv
from gmmflow.steering import solve_momentum_bridge
from gmmflow.student_t import StudentTMarginal, t_true_w2_1d
from gmmflow.toys import random_gmm, ring_toy


def run(*args) -> int:
    return cli.main([str(a) for a in args])


@pytest.fixture
def ring_files(tmp_path):
    g0, g1 = ring_toy()
    write_json(tmp_path / "g0.json", g0.to_dict())
    write_json(tmp_path / "g1.json", g1.to_dict())
    return tmp_path / "g0.json", tmp_path / "g1.json"


@pytest.fixture
def two_clusters(tmp_path):
    rng = np.random.default_rng(5)
    x = np.vstack([rng.normal(-4.0, 0.5, (300, 2)), rng.normal(4.0, 0.5, (200, 2))])
    write_points_csv(tmp_path / "s.csv", x)
    return tmp_path / "s.csv", x


# ---------------------------------------------------------------------------
# fit


def test_fit_two_clusters(tmp_path, two_clusters):
    path, _ = two_clusters
    assert run("-q", "fit", path, "-k", 2, "--seed", 0, "-o", tmp_path / "g.json") == 0
    g = Gmm.from_dict(read_json(tmp_path / "g.json"))
    assert g.num_components == 2
    assert abs(g.weights.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(np.sort(g.weights), [0.4, 0.6], atol=1e-6)


def test_fit_reports_likelihood_on_stderr(tmp_path, two_clusters, capsys):
    path, _ = two_clusters
    run("fit", path, "-k", 2, "--seed", 0, "-o", tmp_path / "g.json")
    err = capsys.readouterr().err
    assert "log-likelihood" in err and "iterations" in err


def test_fit_more_components_than_points_is_input_error(tmp_path):
    write_points_csv(tmp_path / "s.csv", np.arange(6.0).reshape(3, 2))
    assert run("-q", "fit", tmp_path / "s.csv", "-k", 5, "--seed", 0, "-o", tmp_path / "g.json") == 2
    assert not (tmp_path / "g.json").exists()


def test_fit_is_byte_deterministic(tmp_path, two_clusters):
    path, _ = two_clusters
    for name in ("a.json", "b.json"):
        run("-q", "fit", path, "-k", 3, "--seed", 11, "-o", tmp_path / name)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_fit_round_trip_logpdf(tmp_path, two_clusters):
    path, x = two_clusters
    run("-q", "fit", path, "-k", 2, "--seed", 4, "-o", tmp_path / "g.json")
    loaded = Gmm.from_dict(read_json(tmp_path / "g.json"))
    in_memory = em_run(x, EmConfig(2, seed=4)).gmm
    pts = np.random.default_rng(0).normal(0.0, 5.0, (100, 2))
    np.testing.assert_allclose(gmm_logpdf(loaded, pts), gmm_logpdf(in_memory, pts), rtol=1e-15, atol=1e-15)


def test_fit_parse_error_exit_code(tmp_path, capsys):
    (tmp_path / "s.csv").write_text("1,2\n3,4\n5,abc\n")
    assert run("fit", tmp_path / "s.csv", "-k", 1, "--seed", 0, "-o", tmp_path / "g.json") == 2
    assert "s.csv:3" in capsys.readouterr().err


def test_em_numerical_failure_exit_code(tmp_path, two_clusters, monkeypatch):
    def boom(*_a, **_k):
        raise NumericalError("non-finite log-likelihood in EM")

    monkeypatch.setattr(cli, "em_run", boom)
    assert run("-q", "fit", two_clusters[0], "-k", 2, "--seed", 0, "-o", tmp_path / "g.json") == 3


def test_seed_is_mandatory_for_stochastic_commands(tmp_path, two_clusters):
    with pytest.raises(SystemExit) as err:
        run("fit", two_clusters[0], "-k", 2, "-o", tmp_path / "g.json")
    assert err.value.code == 2
    with pytest.raises(ValidationError):
        cli.RunConfig("sample", stochastic=True).validate()


def test_missing_input_is_input_error(tmp_path):
    assert run("-q", "bridge", tmp_path / "nope.json", tmp_path / "nope.json", "--eps", 0, "-o", tmp_path / "b.json") == 2


# ---------------------------------------------------------------------------
# bridge


def test_bridge_ring_toy_cost(tmp_path, ring_files):
    assert run("-q", "bridge", *ring_files, "--eps", 0, "-o", tmp_path / "b.json") == 0
    doc = read_json(tmp_path / "b.json")
    assert abs(doc["j_ot"] - 100.0) < 1e-9
    assert len(doc["plan"]) == 8 and len(doc["policies"]) == 8


def test_bridge_identical_marginals(tmp_path, rng):
    g = random_gmm(rng, 3, 4)
    write_json(tmp_path / "g.json", g.to_dict())
    run("-q", "bridge", tmp_path / "g.json", tmp_path / "g.json", "--eps", 0, "-o", tmp_path / "b.json")
    doc = read_json(tmp_path / "b.json")
    assert abs(doc["j_ot"]) < 1e-12
    assert sorted((e["i"], e["j"]) for e in doc["plan"]) == [(k, k) for k in range(4)]


def test_bridge_dimension_mismatch(tmp_path, rng):
    write_json(tmp_path / "a.json", random_gmm(rng, 2, 2).to_dict())
    write_json(tmp_path / "b.json", random_gmm(rng, 3, 2).to_dict())
    assert run("-q", "bridge", tmp_path / "a.json", tmp_path / "b.json", "--eps", 0, "-o", tmp_path / "o.json") == 2


def test_bridge_training_time_small(tmp_path, rng):
    write_json(tmp_path / "a.json", random_gmm(rng, 2, 10).to_dict())
    write_json(tmp_path / "b.json", random_gmm(rng, 2, 10).to_dict())
    start = time.perf_counter()
    assert run("-q", "bridge", tmp_path / "a.json", tmp_path / "b.json", "--eps", 0.1, "-o", tmp_path / "o.json") == 0
    assert time.perf_counter() - start < 1.0


def test_bridge_file_loads(tmp_path, ring_files):
    run("-q", "bridge", *ring_files, "--eps", 0.1, "-o", tmp_path / "b.json")
    model = BridgeModel.from_dict(read_json(tmp_path / "b.json"))
    assert model.eps == 0.1 and model.dim == 2


# ---------------------------------------------------------------------------
# sample


def test_sample_identical_marginals_stay_put(tmp_path, rng):
    g = random_gmm(rng, 2, 3)
    write_json(tmp_path / "g.json", g.to_dict())
    run("-q", "bridge", tmp_path / "g.json", tmp_path / "g.json", "--eps", 0, "-o", tmp_path / "b.json")
    assert run("-q", "sample", tmp_path / "b.json", "--from-rho0", 50, "--seed", 1, "-o", tmp_path / "t.csv") == 0
    _, states = read_trajectory_csv(tmp_path / "t.csv")
    np.testing.assert_allclose(states, np.broadcast_to(states[0], states.shape), atol=1e-9)


def test_sample_ring_toy_forms_clusters(tmp_path, ring_files):
    run("-q", "bridge", *ring_files, "--eps", 0, "-o", tmp_path / "b.json")
    assert run("-q", "sample", tmp_path / "b.json", "--from-rho0", 2000, "--seed", 3, "--record-every", 1000,
               "-o", tmp_path / "t.csv", "--svg", tmp_path / "t.svg") == 0
    _, states = read_trajectory_csv(tmp_path / "t.csv")
    means = ring_toy()[1].means
    d = np.linalg.norm(states[-1][:, None, :] - means[None], axis=2)
    nearest = d.argmin(axis=1)
    # half the spacing between neighbouring ring modes
    radius = 0.5 * np.linalg.norm(means[0] - means[1])
    purity = np.mean(d[np.arange(d.shape[0]), nearest] < radius)
    assert purity > 0.99
    counts = np.bincount(nearest, minlength=8) / d.shape[0]
    assert np.all(np.abs(counts - 0.125) < 0.03)
    assert (tmp_path / "t.svg").read_text().startswith("<svg")


def test_sample_is_byte_deterministic(tmp_path, ring_files):
    run("-q", "bridge", *ring_files, "--eps", 0.1, "-o", tmp_path / "b.json")
    for name in ("a.csv", "b.csv"):
        run("-q", "sample", tmp_path / "b.json", "--from-rho0", 30, "--seed", 9, "-o", tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_sample_from_points_file(tmp_path, ring_files):
    run("-q", "bridge", *ring_files, "--eps", 0, "-o", tmp_path / "b.json")
    write_points_csv(tmp_path / "x0.csv", np.zeros((3, 2)))
    assert run("-q", "sample", tmp_path / "b.json", "--x0", tmp_path / "x0.csv", "--seed", 0,
               "-o", tmp_path / "t.csv") == 0
    write_points_csv(tmp_path / "x0.csv", np.zeros((3, 3)))
    assert run("-q", "sample", tmp_path / "b.json", "--x0", tmp_path / "x0.csv", "--seed", 0,
               "-o", tmp_path / "t.csv") == 2


def test_sample_high_dimensional_batch_is_fast(tmp_path):
    rng = np.random.default_rng(2)
    d = 512
    g0 = Gmm(np.full(4, 0.25), rng.normal(0, 3, (4, d)), rng.uniform(0.2, 1.0, (4, d)), "diag")
    g1 = Gmm(np.full(4, 0.25), rng.normal(0, 3, (4, d)), rng.uniform(0.2, 1.0, (4, d)), "diag")
    write_json(tmp_path / "a.json", g0.to_dict())
    write_json(tmp_path / "b.json", g1.to_dict())
    run("-q", "bridge", tmp_path / "a.json", tmp_path / "b.json", "--eps", 0.1, "-o", tmp_path / "m.json")
    args = ["-q", "sample", tmp_path / "m.json", "--from-rho0", 10, "--dt", 1e-3, "--seed", 0,
            "--record-every", 1000, "-o", tmp_path / "t.csv"]
    run(*args)  # warm-up compiles the kernels
    start = time.perf_counter()
    assert run(*args) == 0
    assert time.perf_counter() - start < 1.0


# ---------------------------------------------------------------------------
# mm


def _manifest(tmp_path, gmms, times):
    for j, g in enumerate(gmms):
        write_json(tmp_path / f"m{j}.json", g.to_dict())
    write_json(tmp_path / "man.json", {"marginals": [{"t": t, "gmm": f"m{j}.json"} for j, t in enumerate(times)]})
    return tmp_path / "man.json"


def test_mm_two_single_component_marginals_reduce_to_momentum_bridge(tmp_path, rng):
    g0 = Gaussian(rng.normal(size=2), np.diag([0.5, 1.0]))
    g1 = Gaussian(rng.normal(size=2) + 3.0, np.array([[1.0, 0.3], [0.3, 0.8]]))
    gmms = [Gmm.from_components([1.0], [g0]), Gmm.from_components([1.0], [g1])]
    man = _manifest(tmp_path, gmms, [0.0, 2.0])
    assert run("-q", "mm", man, "--eps", 0.1, "--fine-steps", 40, "--particles", 300, "--seed", 0,
               "-o", tmp_path / "out") == 0
    report = read_json(tmp_path / "out" / "report.json")
    direct = solve_momentum_bridge([(0.0, g0), (2.0, g1)], 0.1, steps_per_unit=40)
    assert abs(report["objective"] - direct.objective) < 1e-9 * max(1.0, direct.objective)
    assert report["plan"] == [{"idx": [0, 0], "lambda": 1.0}]
    times, states = read_trajectory_csv(tmp_path / "out" / "trajectories.csv")
    assert states.shape[2] == 4 and times[0] == 0.0 and times[-1] == 2.0


def test_mm_outputs_and_determinism(tmp_path):
    rng = np.random.default_rng(8)
    gmms = [random_gmm(rng, 2, 2) for _ in range(3)]
    man = _manifest(tmp_path, gmms, [0.0, 1.0, 3.0])
    for out in ("o1", "o2"):
        assert run("-q", "mm", man, "--eps", 0.0, "--coarse-steps", 5, "--fine-steps", 20, "--particles", 200,
                   "--permutations", 50, "--seed", 2, "-o", tmp_path / out, "--svg") == 0
    for name in ("model.json", "report.json", "trajectories.csv"):
        assert (tmp_path / "o1" / name).read_bytes() == (tmp_path / "o2" / name).read_bytes()
    report = read_json(tmp_path / "o1" / "report.json")
    assert report["axis_sum_error"] < 1e-9
    assert len(report["marginal_tests"]) == 3
    assert report["policy"] == "sample"
    assert (tmp_path / "o1" / "trajectories.svg").exists()


@pytest.mark.parametrize("times", [[0.0, 0.0], [1.0, 0.5]])
def test_mm_rejects_unordered_times(tmp_path, rng, times):
    man = _manifest(tmp_path, [random_gmm(rng, 2, 1) for _ in times], times)
    assert run("-q", "mm", man, "--eps", 0.0, "--seed", 0, "-o", tmp_path / "out") == 2


def test_mm_missing_marginal_file(tmp_path):
    write_json(tmp_path / "man.json", {"marginals": [{"t": 0, "gmm": "a.json"}, {"t": 1, "gmm": "b.json"}]})
    assert run("-q", "mm", tmp_path / "man.json", "--eps", 0.0, "--seed", 0, "-o", tmp_path / "out") == 2


def test_mm_infeasible_exit_code(tmp_path, rng, monkeypatch):
    import gmmflow.steering as steering

    def infeasible(*_a, **_k):
        raise InfeasibleError("axis 0 has a weighted index with no finite-cost tuple")

    monkeypatch.setattr(steering, "build_mm_model", infeasible)
    man = _manifest(tmp_path, [random_gmm(rng, 2, 1) for _ in range(2)], [0.0, 1.0])
    assert run("-q", "mm", man, "--eps", 0.0, "--seed", 0, "-o", tmp_path / "out") == 4


# ---------------------------------------------------------------------------
# tbound


def test_tbound_equal_parameters_give_zero(tmp_path):
    assert run("-q", "tbound", "--nu0", 4, "--nu1", 4, "--sigma0", 2, "--sigma1", 2, "-o", tmp_path / "t.csv") == 0
    data, header = read_points_csv(tmp_path / "t.csv")
    assert header == ["upper_bound", "true_w2"]
    np.testing.assert_array_equal(data, [[0.0, 0.0]])


def test_tbound_sweep_panels(tmp_path):
    assert run("-q", "tbound", "--nu0", 3, "--sweep", "nu1=2.5:10:16", "--panels", "sigma1=0.25,1,4",
               "-o", tmp_path / "t.csv", "--svg", tmp_path / "t.svg") == 0
    data, header = read_points_csv(tmp_path / "t.csv")
    assert header == ["sigma1", "nu1", "upper_bound", "true_w2"]
    assert data.shape == (48, 4)
    assert np.all(data[:, 2] >= data[:, 3] - 1e-8)
    row = data[(data[:, 0] == 4.0) & (data[:, 1] == 5.0)][0]
    exact = t_true_w2_1d(StudentTMarginal(3.0, [0.0], [[1.0]]), StudentTMarginal(5.0, [0.0], [[4.0]]))
    assert abs(row[3] - exact) < 1e-12
    svg = (tmp_path / "t.svg").read_text()
    assert svg.count("sigma1=") == 3


def test_tbound_multivariate_has_no_exact_column(tmp_path):
    run("-q", "tbound", "--nu0", 3, "--nu1", 5, "--dim", 3, "-o", tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[1].endswith(",")


@pytest.mark.parametrize("spec", ["nu1=2.5:10", "bogus=1:2:3", "nu1"])
def test_tbound_bad_sweep(tmp_path, spec):
    assert run("-q", "tbound", "--sweep", spec, "-o", tmp_path / "t.csv") == 2


# ---------------------------------------------------------------------------
# metrics


def _metric(tmp_path, *args):
    out = tmp_path / "r.json"
    assert run("-q", "metrics", *args, "-o", out) == 0
    return read_json(out)


def test_metrics_mmd_identical_files_is_zero(tmp_path, rng):
    write_points_csv(tmp_path / "a.csv", rng.standard_normal((300, 2)))
    rep = _metric(tmp_path, "mmd", tmp_path / "a.csv", tmp_path / "a.csv")
    assert rep["mmd"] == 0.0
    assert rep["config"]["clamped"] is True


def test_metrics_ot_two_by_two(tmp_path):
    write_points_csv(tmp_path / "a.csv", np.array([[0.0, 0.0], [1.0, 0.0]]))
    write_points_csv(tmp_path / "b.csv", np.array([[1.0, 1.0], [0.0, 1.0]]))
    rep = _metric(tmp_path, "ot", tmp_path / "a.csv", tmp_path / "b.csv")
    # straight matching costs 1 per point; crossing would cost 3
    assert rep["ot"] == pytest.approx(1.0, abs=1e-12)


def test_metrics_bw_gaussian_draws(tmp_path):
    rng = np.random.default_rng(1)
    write_points_csv(tmp_path / "a.csv", rng.standard_normal((20000, 2)))
    write_points_csv(tmp_path / "b.csv", rng.standard_normal((20000, 2)) + [3.0, 0.0])
    rep = _metric(tmp_path, "bw", tmp_path / "a.csv", tmp_path / "b.csv")
    exact = bw_distance_sq(Gaussian(np.zeros(2), np.eye(2)), Gaussian(np.array([3.0, 0.0]), np.eye(2)))
    assert abs(rep["bw"] - exact) < 0.2


def test_metrics_stochastic_need_seed(tmp_path, rng):
    write_points_csv(tmp_path / "a.csv", rng.standard_normal((30, 2)))
    assert run("-q", "metrics", "swd", tmp_path / "a.csv", tmp_path / "a.csv") == 2
    rep = _metric(tmp_path, "mmd-test", tmp_path / "a.csv", tmp_path / "a.csv", "--seed", 0, "--permutations", 50)
    assert rep["config"]["passed"] is True


def test_metrics_stdout(tmp_path, rng, capsys):
    write_points_csv(tmp_path / "a.csv", rng.standard_normal((30, 2)))
    assert run("metrics", "swd", tmp_path / "a.csv", tmp_path / "a.csv", "--seed", 3) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["swd"] == 0.0 and rep["config"]["projections"] == 100


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gmmflow.cli", "tbound", "-o", str(tmp_path / "t.csv")],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
