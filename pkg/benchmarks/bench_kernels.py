"""Compare the compiled and pure-numpy routes of the mixture-drift kernel.

Run ``python benchmarks/bench_kernels.py`` (add ``--json`` for machine output).
With ``GMMFLOW_DISABLE_JIT=1`` only the numpy route is timed.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from gmmflow._jit import JIT_ENABLED
from gmmflow.bridge import _mixture_eval, build_bridge
from gmmflow.toys import random_gmm

# (particles, components per side, dim, diagonal covariances)
DEFAULT_CASES = [
    (1024, 4, 2, False),
    (4096, 8, 2, False),
    (1024, 8, 16, False),
    (256, 10, 128, False),
    (1024, 10, 512, True),
]


@dataclass
class BenchRow:
    particles: int
    pairs: int
    dim: int
    diag: bool
    numpy_ms: float
    jit_ms: float | None
    speedup: float | None
    max_abs_diff: float | None


def _best_of(fn, repeat: int) -> float:
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return 1e3 * best


def bench_case(n: int, k: int, d: int, diag: bool, repeat: int = 5, seed: int = 0) -> BenchRow:
    rng = np.random.default_rng(seed)
    model = build_bridge(random_gmm(rng, d, k, diag=diag), random_gmm(rng, d, k, diag=diag), 0.1)
    ps = model.pair_state(0.5)
    x = rng.normal(0.0, 3.0, (n, d))
    ref = _mixture_eval(x, ps, use_jit=False)
    numpy_ms = _best_of(lambda: _mixture_eval(x, ps, use_jit=False), repeat)
    if not JIT_ENABLED:
        return BenchRow(n, ps.means.shape[0], d, diag, numpy_ms, None, None, None)
    out = _mixture_eval(x, ps, use_jit=True)  # first call compiles
    jit_ms = _best_of(lambda: _mixture_eval(x, ps, use_jit=True), repeat)
    diff = float(np.max(np.abs(out - ref)))
    return BenchRow(n, ps.means.shape[0], d, diag, numpy_ms, jit_ms, numpy_ms / jit_ms, diff)


def run_benchmarks(cases=None, repeat: int = 5) -> list[BenchRow]:
    return [bench_case(*c, repeat=repeat) for c in (DEFAULT_CASES if cases is None else cases)]


def _table(rows: list[BenchRow]) -> str:
    head = f"{'n':>6} {'pairs':>5} {'dim':>4} {'diag':>5} {'numpy ms':>10} {'jit ms':>9} {'speedup':>8} {'max diff':>9}"
    lines = [head, "-" * len(head)]
    for r in rows:
        jit = f"{r.jit_ms:9.2f}" if r.jit_ms is not None else f"{'-':>9}"
        sp = f"{r.speedup:7.1f}x" if r.speedup is not None else f"{'-':>8}"
        df = f"{r.max_abs_diff:9.1e}" if r.max_abs_diff is not None else f"{'-':>9}"
        lines.append(f"{r.particles:6d} {r.pairs:5d} {r.dim:4d} {str(r.diag):>5} {r.numpy_ms:10.2f} {jit} {sp} {df}")
    return "\n".join(lines)


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--json", action="store_true")
    args = p.parse_args(argv)
    rows = run_benchmarks(repeat=args.repeat)
    if args.json:
        print(json.dumps({"jit_enabled": JIT_ENABLED, "rows": [asdict(r) for r in rows]}, indent=2))
    else:
        print(f"numba route {'enabled' if JIT_ENABLED else 'disabled'}")
        print(_table(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
