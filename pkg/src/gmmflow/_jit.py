"""Optional numba acceleration.

Hot kernels are written once as plain Python loops and decorated with
:func:`maybe_njit`. When numba is importable and ``GMMFLOW_DISABLE_JIT`` is
unset (or ``0``), the kernels are compiled; otherwise the undecorated
function is returned and callers select their pure-numpy route instead.
"""

from __future__ import annotations

import os

_FLAG = os.environ.get("GMMFLOW_DISABLE_JIT", "0").strip().lower()

try:  # pragma: no cover - depends on the environment
    import numba as _nb
except ImportError:  # pragma: no cover
    _nb = None

JIT_ENABLED: bool = _nb is not None and _FLAG in ("", "0", "false", "no")

njit_kwargs = {"nogil": True, "fastmath": False, "cache": True}


def maybe_njit(func):
    """Compile ``func`` with numba when acceleration is enabled.

    The original Python function stays reachable as ``py_func`` in both
    cases so tests and benchmarks can compare the two routes.
    """
    if JIT_ENABLED:
        compiled = _nb.njit(**njit_kwargs)(func)
        return compiled
    func.py_func = func
    return func


def worker_count(requested: int | None = None) -> int:
    """Number of worker threads, capped by ``GMMFLOW_THREADS``."""
    n = requested if requested is not None else (os.cpu_count() or 1)
    cap = os.environ.get("GMMFLOW_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)
