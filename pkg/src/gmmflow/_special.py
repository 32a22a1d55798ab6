"""Regularized incomplete gamma and beta functions and their inverses.

Series for small arguments and a modified-Lentz continued fraction otherwise,
switched at ``x = a + 1`` (gamma) and ``x = (a + 1) / (a + b + 2)`` (beta).
Both tails are returned so callers never form ``1 - p`` for tiny ``p``.
"""

from __future__ import annotations

import math

from ._jit import maybe_njit

TERM_TOL = 1e-15
MAX_TERMS = 10_000
TINY = 1e-300


@maybe_njit
def gamma_tails(a: float, x: float) -> tuple[float, float]:
    """Return ``(P(a, x), Q(a, x))``, the lower and upper regularized tails."""
    if x <= 0.0:
        return 0.0, 1.0
    if math.isinf(x):
        return 1.0, 0.0
    log_front = a * math.log(x) - x - math.lgamma(a)
    if x < a + 1.0:
        ap = a
        term = 1.0 / a
        total = term
        for _ in range(MAX_TERMS):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * TERM_TOL:
                break
        p = total * math.exp(log_front)
        p = min(p, 1.0)
        return p, 1.0 - p
    b = x + 1.0 - a
    c = 1.0 / TINY
    d = 1.0 / b
    h = d
    for i in range(1, MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < TINY:
            d = TINY
        c = b + an / c
        if abs(c) < TINY:
            c = TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < TERM_TOL:
            break
    q = math.exp(log_front) * h
    q = min(q, 1.0)
    return 1.0 - q, q


@maybe_njit
def _beta_cf(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < TINY:
        d = TINY
    d = 1.0 / d
    h = d
    for m in range(1, MAX_TERMS):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < TINY:
            d = TINY
        c = 1.0 + aa / c
        if abs(c) < TINY:
            c = TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < TINY:
            d = TINY
        c = 1.0 + aa / c
        if abs(c) < TINY:
            c = TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < TERM_TOL:
            break
    return h


@maybe_njit
def beta_tails(a: float, b: float, x: float, xc: float) -> tuple[float, float]:
    """Return ``(I_x(a, b), 1 - I_x(a, b))`` given ``x`` and ``xc = 1 - x``."""
    if x <= 0.0:
        return 0.0, 1.0
    if xc <= 0.0:
        return 1.0, 0.0
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log(xc)
    if x < (a + 1.0) / (a + b + 2.0):
        lo = math.exp(log_front) * _beta_cf(a, b, x) / a
        return lo, 1.0 - lo
    hi = math.exp(log_front) * _beta_cf(b, a, xc) / b
    return 1.0 - hi, hi


@maybe_njit
def student_upper_tail(nu: float, t: float) -> float:
    """``P(T > t)`` for a standard Student-t variable with ``nu`` degrees of freedom."""
    if t == 0.0:
        return 0.5
    tt = t * t
    x = nu / (nu + tt)
    xc = tt / (nu + tt)
    small, _ = beta_tails(0.5 * nu, 0.5, x, xc)
    return 0.5 * small if t > 0 else 1.0 - 0.5 * small


@maybe_njit
def _log_or_neg_inf(v: float) -> float:
    # the compiled route returns -inf for log(0); plain math.log raises
    return math.log(v) if v > 0.0 else -math.inf


@maybe_njit
def student_quantile_upper(nu: float, s: float) -> float:
    """The ``t > 0`` with ``P(T > t) = s`` for ``s`` in ``(0, 1/2]``.

    Bisection on ``log t`` to full precision, then two Newton steps on the
    log tail.
    """
    if s >= 0.5:
        return 0.0
    log_s = math.log(s)
    lo = -40.0
    hi = 1.0
    while _log_or_neg_inf(student_upper_tail(nu, math.exp(hi))) > log_s:
        hi = 2.0 * hi + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _log_or_neg_inf(student_upper_tail(nu, math.exp(mid))) > log_s:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(mid)):
            break
    t = math.exp(0.5 * (lo + hi))
    log_c = math.lgamma(0.5 * (nu + 1.0)) - math.lgamma(0.5 * nu) - 0.5 * math.log(nu * math.pi)
    for _ in range(2):
        tail = student_upper_tail(nu, t)
        dens = math.exp(log_c - 0.5 * (nu + 1.0) * math.log1p(t * t / nu))
        if tail <= 0.0 or dens <= 0.0:
            break
        # Newton on log tail: d/dt log S(t) = -f(t) / S(t)
        step = (math.log(tail) - log_s) * tail / dens
        if not math.isfinite(step) or abs(step) > 0.5 * t:
            break
        t += step
    return t


@maybe_njit
def gamma_quantile(a: float, p: float, q: float) -> float:
    """The ``x`` with ``P(a, x) = p``, where ``q = 1 - p`` is passed separately.

    The smaller tail drives the search, so both ends keep full relative
    accuracy.
    """
    if p <= 0.0:
        return 0.0
    if q <= 0.0:
        return math.inf
    use_lower = p <= q
    target = math.log(p) if use_lower else math.log(q)
    lo = -1.0
    hi = 1.0

    def err(y):
        lo_t, up_t = gamma_tails(a, math.exp(y))
        v = lo_t if use_lower else up_t
        if v <= 0.0:
            return -math.inf if use_lower else math.inf
        diff = math.log(v) - target
        return diff if use_lower else -diff

    # err is increasing in y
    while err(lo) > 0.0:
        lo = 2.0 * lo - 1.0
    while err(hi) < 0.0:
        hi = 2.0 * hi + 1.0
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if err(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15 * max(1.0, abs(mid)):
            break
    x = math.exp(0.5 * (lo + hi))
    log_norm = math.lgamma(a)
    for _ in range(2):
        lo_t, up_t = gamma_tails(a, x)
        v = lo_t if use_lower else up_t
        dens = math.exp((a - 1.0) * math.log(x) - x - log_norm)
        if v <= 0.0 or dens <= 0.0:
            break
        step = (math.log(v) - target) * v / dens
        x_new = x - step if use_lower else x + step
        if not math.isfinite(x_new) or x_new <= 0.5 * x or x_new >= 2.0 * x:
            break
        x = x_new
    return x
