"""Command-line entry point: ``gmmflow <command> ...``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 infeasible problem.
Every stochastic command takes a mandatory ``--seed``; primary outputs are
written in canonical formats so repeated runs give identical bytes.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bridge import BridgeModel, IntegratorConfig, build_bridge, integrate, sample_source
from .errors import InfeasibleError, NumericalError, ValidationError
from .gmm import EmConfig, Gmm, em_run, gmm_sample
from .io import (
    InputError,
    dumps_canonical,
    line_panels_svg,
    read_json,
    read_points,
    trajectory_svg,
    write_json,
    write_table_csv,
    write_trajectory_csv,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERICAL = 3
EXIT_INFEASIBLE = 4

log = logging.getLogger("gmmflow")


@dataclass
class RunConfig:
    """Resolved settings of one command invocation."""

    command: str
    seed: int | None = None
    eps: float | None = None
    integrator: IntegratorConfig | None = None
    em: EmConfig | None = None
    tolerances: dict = field(default_factory=dict)
    inputs: list[Path] = field(default_factory=list)
    outputs: list[Path] = field(default_factory=list)
    plot: bool = False
    stochastic: bool = False

    def validate(self) -> None:
        if self.stochastic and self.seed is None:
            raise ValidationError(f"{self.command}: --seed is required")
        if self.eps is not None and not (np.isfinite(self.eps) and self.eps >= 0):
            raise ValidationError("--eps must be a finite non-negative number")
        for p in self.inputs:
            if not p.is_file():
                raise InputError("input file not found", p)
        for p in self.outputs:
            parent = p.parent if str(p.parent) else Path(".")
            if not parent.is_dir():
                raise InputError("output directory does not exist", p)


def _load_gmm(path: Path) -> Gmm:
    data = read_json(path)
    try:
        return Gmm.from_dict(data)
    except ValidationError as exc:
        raise InputError(str(exc), path) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args) -> int:
    em = EmConfig(args.components, args.max_iters, args.tol, args.restarts, args.seed, cov_type=args.cov_type)
    cfg = RunConfig("fit", seed=args.seed, em=em, inputs=[args.samples], outputs=[args.out], stochastic=True)
    cfg.validate()
    x = read_points(args.samples)
    if args.components > x.shape[0]:
        raise InputError(f"{args.components} components requested for {x.shape[0]} samples", args.samples)
    res = em_run(x, em)
    write_json(args.out, res.gmm.to_dict())
    log.info("log-likelihood %.10g after %d iterations (restarts: %s)", res.log_likelihood, res.iterations,
             ", ".join(f"{v:.6g}" for v in res.restart_log_likelihoods))
    return EXIT_OK


def cmd_bridge(args) -> int:
    cfg = RunConfig("bridge", eps=args.eps, inputs=[args.gmm0, args.gmm1], outputs=[args.out])
    cfg.validate()
    g0, g1 = _load_gmm(args.gmm0), _load_gmm(args.gmm1)
    if g0.dim != g1.dim:
        raise ValidationError(f"dimension mismatch: {g0.dim} vs {g1.dim}")
    start = time.perf_counter()
    model = build_bridge(g0, g1, args.eps)
    elapsed = time.perf_counter() - start
    write_json(args.out, model.to_dict())
    log.info("j_ot %.12g over %d pairs; trained in %.3f s", model.j_ot, model.lam.size, elapsed)
    return EXIT_OK


def cmd_sample(args) -> int:
    icfg = IntegratorConfig(args.dt, args.scheme, args.seed, args.record_every)
    inputs = [args.bridge] + ([args.x0] if args.x0 else [])
    outputs = [args.out] + ([args.svg] if args.svg else [])
    cfg = RunConfig("sample", seed=args.seed, integrator=icfg, inputs=inputs, outputs=outputs,
                    plot=args.svg is not None, stochastic=True)
    cfg.validate()
    try:
        model = BridgeModel.from_dict(read_json(args.bridge))
    except ValidationError as exc:
        raise InputError(str(exc), args.bridge) from exc
    if args.x0 is not None:
        x0 = read_points(args.x0)
        if x0.shape[1] != model.dim:
            raise InputError(f"points have dimension {x0.shape[1]}, model has {model.dim}", args.x0)
    else:
        if args.from_rho0 < 1:
            raise ValidationError("--from-rho0 needs a positive count")
        x0 = sample_source(model, args.from_rho0, args.seed)
    start = time.perf_counter()
    traj = integrate(model, x0, icfg)
    log.info("integrated %d particles over %d frames in %.3f s", x0.shape[0], traj.times.size,
             time.perf_counter() - start)
    write_trajectory_csv(args.out, traj.times, traj.states)
    if args.svg:
        trajectory_svg(args.svg, traj.states, title=f"eps={model.eps:g}")
    return EXIT_OK


def _load_manifest(path: Path) -> tuple[np.ndarray, list[Gmm]]:
    data = read_json(path)
    try:
        entries = data["marginals"]
        times = np.array([float(e["t"]) for e in entries])
        files = [Path(e["gmm"]) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"malformed manifest: {exc}", path) from exc
    if len(entries) < 2:
        raise InputError("manifest needs at least two marginals", path)
    if np.any(np.diff(times) <= 0):
        raise InputError("marginal times must be strictly increasing", path)
    base = path.parent
    gmms = []
    for f in files:
        f = f if f.is_absolute() else base / f
        if not f.is_file():
            raise InputError("marginal GMM file not found", f)
        gmms.append(_load_gmm(f))
    if any(g.dim != gmms[0].dim for g in gmms):
        raise InputError("marginal GMMs disagree on dimension", path)
    return times, gmms


def cmd_mm(args) -> int:
    from .metrics import mmd_permutation_test
    from .steering import MmIntegratorConfig, build_mm_model, marginal_positions, mm_integrate

    out = args.out_dir
    cfg = RunConfig("mm", seed=args.seed, eps=args.eps, inputs=[args.manifest], plot=args.svg,
                    tolerances={"coarse_steps": args.coarse_steps, "fine_steps": args.fine_steps},
                    stochastic=True)
    cfg.validate()
    if args.coarse_steps < 1 or args.fine_steps < 1:
        raise ValidationError("step counts must be positive")
    if args.particles < 2:
        raise ValidationError("--particles must be at least 2")
    times, gmms = _load_manifest(args.manifest)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    model = build_mm_model(gmms, args.eps, times, args.coarse_steps, args.fine_steps)
    t_build = time.perf_counter() - start
    log.info("plan over %d tuples with support %d; LP objective %.10g; built in %.1f s",
             model.diagnostics["tuples"], model.lam.size, model.lp_objective, t_build)
    x0 = gmm_sample(gmms[0], args.particles, [args.seed, 1])
    icfg = MmIntegratorConfig(args.seed, args.record_every, policy=args.policy)
    traj = mm_integrate(model, x0, icfg)
    d = model.dim
    write_trajectory_csv(out / "trajectories.csv", traj.times, traj.states,
                         [f"x_{j}" for j in range(d)] + [f"v_{j}" for j in range(d)])
    tests = []
    for j, (g, pos) in enumerate(zip(gmms, marginal_positions(model, traj))):
        fresh = gmm_sample(g, args.particles, [args.seed, 1000 + j])
        res = mmd_permutation_test(pos, fresh, args.permutations, seed=args.seed)
        tests.append({"t": float(times[j]), "mmd": res.statistic, "p_value": res.p_value,
                      "null_q95": res.null_quantile_95, "bandwidth": res.bandwidth, "passed": res.passed})
    write_json(out / "model.json", model.to_dict())
    report = {
        "eps": float(args.eps),
        "lp_objective": float(model.lp_objective),
        "objective": float(model.objective),
        "plan": [{"idx": [int(v) for v in idx], "lambda": float(l)} for idx, l in zip(model.indices, model.lam)],
        "axis_sum_error": float(max(np.max(np.abs(s - g.weights)) for s, g in zip(model.axis_sums(), gmms))),
        "marginal_tests": tests,
        "particles": int(args.particles),
        "policy": icfg.resolved_policy(model.eps),
        "seed": int(args.seed),
    }
    write_json(out / "report.json", report)
    if args.svg:
        trajectory_svg(out / "trajectories.svg", traj.states[:, :, :d], title=f"eps={args.eps:g}")
    log.info("total runtime %.1f s; marginal MMD tests passed: %d/%d", time.perf_counter() - start,
             sum(t["passed"] for t in tests), len(tests))
    return EXIT_OK


_T_PARAMS = ("nu0", "nu1", "sigma0", "sigma1", "mu0", "mu1")


def _parse_sweep(spec: str) -> tuple[str, np.ndarray]:
    try:
        name, rng = spec.split("=", 1)
        lo, hi, count = rng.split(":")
        grid = np.linspace(float(lo), float(hi), int(count))
    except ValueError as exc:
        raise ValidationError(f"sweep must look like nu1=2.5:10:31, got {spec!r}") from exc
    if name not in _T_PARAMS:
        raise ValidationError(f"cannot sweep {name!r}; choose from {', '.join(_T_PARAMS)}")
    if grid.size < 1:
        raise ValidationError("sweep needs at least one point")
    return name, grid


def _parse_panels(spec: str) -> tuple[str, list[float]]:
    try:
        name, vals = spec.split("=", 1)
        values = [float(v) for v in vals.split(",")]
    except ValueError as exc:
        raise ValidationError(f"panels must look like sigma1=0.25,1,4, got {spec!r}") from exc
    if name not in _T_PARAMS:
        raise ValidationError(f"cannot vary {name!r}; choose from {', '.join(_T_PARAMS)}")
    return name, values


def cmd_tbound(args) -> int:
    from .student_t import StudentTMarginal, t_true_w2_1d, t_w2_upper_bound

    outputs = [args.out] + ([args.svg] if args.svg else [])
    cfg = RunConfig("tbound", outputs=outputs, plot=args.svg is not None, tolerances={"nodes": args.nodes})
    cfg.validate()
    if args.dim < 1:
        raise ValidationError("--dim must be positive")
    base = {k: getattr(args, k) for k in _T_PARAMS}
    sweep_name, grid = _parse_sweep(args.sweep) if args.sweep else (None, np.array([np.nan]))
    panel_name, panel_vals = _parse_panels(args.panels) if args.panels else (None, [np.nan])
    eye = np.eye(args.dim)

    def marginal(nu, mu, sigma):
        return StudentTMarginal(nu, mu * np.ones(args.dim), sigma * eye)

    header = ([panel_name] if panel_name else []) + ([sweep_name] if sweep_name else []) + ["upper_bound", "true_w2"]
    rows, panels = [], []
    for pv in panel_vals:
        bounds, trues = [], []
        for sv in grid:
            p = dict(base)
            if panel_name:
                p[panel_name] = pv
            if sweep_name:
                p[sweep_name] = float(sv)
            m0 = marginal(p["nu0"], p["mu0"], p["sigma0"])
            m1 = marginal(p["nu1"], p["mu1"], p["sigma1"])
            ub = t_w2_upper_bound(m0, m1, args.nodes)
            tw = t_true_w2_1d(m0, m1, args.nodes) if args.dim == 1 else None
            bounds.append(ub)
            trues.append(tw)
            rows.append(([pv] if panel_name else []) + ([float(sv)] if sweep_name else []) + [ub, tw])
        title = f"{panel_name}={pv:g}" if panel_name else "Student-t W2"
        panels.append({"title": title, "x": grid if sweep_name else np.zeros(1),
                       "series": {"upper bound": bounds, "true W2^2": trues}})
    write_table_csv(args.out, header, rows)
    if args.svg:
        line_panels_svg(args.svg, panels, sweep_name or "point", "squared W2")
    log.info("wrote %d rows", len(rows))
    return EXIT_OK


def cmd_metrics(args) -> int:
    from . import metrics as mt

    stochastic = args.metric in ("swd", "mmd-test")
    cfg = RunConfig("metrics", seed=args.seed, inputs=[args.a, args.b],
                    outputs=[args.out] if args.out else [], stochastic=stochastic)
    cfg.validate()
    a, b = read_points(args.a), read_points(args.b)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    bw_arg = "median" if args.bandwidth is None else args.bandwidth
    conf: dict = {"n_a": a.shape[0], "n_b": b.shape[0], "dim": a.shape[1]}
    if args.metric == "mmd":
        res = mt.mmd_rbf_details(a, b, bw_arg)
        value = res.value
        conf.update(bandwidth=res.bandwidth, clamped=res.clamped, raw=res.raw)
    elif args.metric == "mmd-test":
        res = mt.mmd_permutation_test(a, b, args.permutations, seed=args.seed, bandwidth=bw_arg)
        value = res.statistic
        conf.update(bandwidth=res.bandwidth, p_value=res.p_value, null_q95=res.null_quantile_95,
                    permutations=res.num_permutations, passed=res.passed, seed=args.seed)
    elif args.metric == "swd":
        value = mt.sliced_w2(a, b, args.projections, args.seed)
        conf.update(projections=args.projections, seed=args.seed, squared=True)
    elif args.metric == "bw":
        value = mt.empirical_bw(a, b)
        conf.update(regularization=mt.BW_REGULARIZATION)
    else:
        value, plan = mt.discrete_ot(a, b, args.max_n)
        conf.update(max_n=args.max_n, support=int(plan.mass.size))
    report = {args.metric: float(value), "config": conf}
    text = dumps_canonical(report) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gmmflow", description="Mixture-model bridges and transport tools.")
    p.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a Gaussian mixture to a CSV of samples by EM")
    f.add_argument("samples", type=Path)
    f.add_argument("-k", "--components", type=int, required=True)
    f.add_argument("--cov-type", choices=("full", "diag"), default="full")
    f.add_argument("--seed", type=int, required=True)
    f.add_argument("--max-iters", type=int, default=200)
    f.add_argument("--tol", type=float, default=1e-6)
    f.add_argument("--restarts", type=int, default=3)
    f.add_argument("-o", "--out", type=Path, required=True)
    f.set_defaults(func=cmd_fit)

    b = sub.add_parser("bridge", help="train a two-marginal mixture bridge")
    b.add_argument("gmm0", type=Path)
    b.add_argument("gmm1", type=Path)
    b.add_argument("--eps", type=float, required=True)
    b.add_argument("-o", "--out", type=Path, required=True)
    b.set_defaults(func=cmd_bridge)

    s = sub.add_parser("sample", help="simulate particles through a trained bridge")
    s.add_argument("bridge", type=Path)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--x0", type=Path, help="CSV of initial points")
    src.add_argument("--from-rho0", type=int, metavar="N", help="draw N initial points from the source mixture")
    s.add_argument("--dt", type=float, default=None, help="step size (default 1e-3 if eps > 0, else 1e-2)")
    s.add_argument("--scheme", choices=("euler", "rk4"), default="euler")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--record-every", type=int, default=10)
    s.add_argument("-o", "--out", type=Path, required=True)
    s.add_argument("--svg", type=Path, default=None)
    s.set_defaults(func=cmd_sample)

    m = sub.add_parser("mm", help="multi-marginal momentum bridge through mixtures listed in a manifest")
    m.add_argument("manifest", type=Path)
    m.add_argument("--eps", type=float, required=True)
    m.add_argument("--coarse-steps", type=int, default=10, help="grid steps per unit time for the cost tensor")
    m.add_argument("--fine-steps", type=int, default=100, help="grid steps per unit time for supported tuples")
    m.add_argument("--particles", type=int, default=2000)
    m.add_argument("--permutations", type=int, default=200)
    m.add_argument("--record-every", type=int, default=10)
    m.add_argument("--policy", choices=("auto", "average", "sample"), default="auto",
                   help="combine tuple feedbacks by weighted average or by drawing one tuple per step "
                        "(auto: draw when eps = 0)")
    m.add_argument("--seed", type=int, required=True)
    m.add_argument("-o", "--out-dir", type=Path, required=True)
    m.add_argument("--svg", action="store_true")
    m.set_defaults(func=cmd_mm)

    t = sub.add_parser("tbound", help="Student-t W2 upper bound against the exact 1-D value")
    t.add_argument("--nu0", type=float, default=3.0)
    t.add_argument("--nu1", type=float, default=3.0)
    t.add_argument("--sigma0", type=float, default=1.0, help="scale-matrix entry of the first law (sigma * I)")
    t.add_argument("--sigma1", type=float, default=1.0, help="scale-matrix entry of the second law (sigma * I)")
    t.add_argument("--mu0", type=float, default=0.0)
    t.add_argument("--mu1", type=float, default=0.0)
    t.add_argument("--dim", type=int, default=1, help="isotropic dimension; exact W2 only for 1")
    t.add_argument("--sweep", default=None, metavar="PARAM=LO:HI:COUNT")
    t.add_argument("--panels", default=None, metavar="PARAM=V1,V2,...")
    t.add_argument("--nodes", type=int, default=128)
    t.add_argument("-o", "--out", type=Path, required=True)
    t.add_argument("--svg", type=Path, default=None)
    t.set_defaults(func=cmd_tbound)

    r = sub.add_parser("metrics", help="compare two CSV sample files")
    r.add_argument("metric", choices=("mmd", "mmd-test", "swd", "bw", "ot"))
    r.add_argument("a", type=Path)
    r.add_argument("b", type=Path)
    r.add_argument("--bandwidth", type=float, default=None, help="fixed kernel width (default: median heuristic)")
    r.add_argument("--projections", type=int, default=100)
    r.add_argument("--permutations", type=int, default=200)
    r.add_argument("--max-n", type=int, default=2000)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("-o", "--out", type=Path, default=None)
    r.set_defaults(func=cmd_metrics)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="gmmflow: %(message)s",
                        stream=sys.stderr, force=True)
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except InfeasibleError as exc:
        log.error("infeasible: %s", exc)
        return EXIT_INFEASIBLE
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except ValidationError as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT
    except OSError as exc:
        log.error("input error: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
