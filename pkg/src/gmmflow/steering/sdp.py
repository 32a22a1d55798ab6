"""Batched primal-dual interior-point solver for staged block SDPs.

Problems have the form

    minimize    sum_b <C_b, X_b>
    subject to  sum_{(b, L, s) in f} s * L X_b L^T = R_f   for every family f
                X_b >= 0

where every ``X_b`` is an ``N x N`` symmetric block and each constraint
family ``f`` is a symmetric ``p x p`` matrix equation. Families are grouped
into stages such that a family in stage ``s`` only touches blocks shared
with stages ``s - 1`` and ``s + 1``. The Schur complement of the
Newton system is then block tridiagonal and is factored stage by stage.

One structure (blocks, legs, costs) is solved for a batch of right-hand
sides at once; every batch member carries its own iterate and step sizes.
The search direction is HKM with a Mehrotra predictor-corrector.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError

SQRT2 = np.sqrt(2.0)


def svec_basis(p: int) -> np.ndarray:
    """Rows are ``vec(E_r)`` for the orthonormal symmetric basis of ``p x p`` matrices."""
    rows = []
    for i in range(p):
        for j in range(i, p):
            e = np.zeros((p, p))
            if i == j:
                e[i, i] = 1.0
            else:
                e[i, j] = e[j, i] = 1.0 / SQRT2
            rows.append(e.ravel())
    return np.array(rows)


_BASES: dict[int, np.ndarray] = {}


def _basis(p: int) -> np.ndarray:
    if p not in _BASES:
        _BASES[p] = svec_basis(p)
    return _BASES[p]


def svec(m: np.ndarray) -> np.ndarray:
    """Batched ``svec``: ``(..., p, p) -> (..., p(p+1)/2)``."""
    p = m.shape[-1]
    return m.reshape(*m.shape[:-2], p * p) @ _basis(p).T


def smat(v: np.ndarray, p: int) -> np.ndarray:
    """Inverse of :func:`svec` for batched vectors."""
    return (v @ _basis(p)).reshape(*v.shape[:-1], p, p)


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + np.swapaxes(m, -1, -2))


@dataclass(frozen=True)
class Term:
    block: int
    leg: np.ndarray  # (p, N)
    sign: float = 1.0


@dataclass
class Family:
    """One symmetric matrix equation ``sum s L X_b L^T = rhs``; ``rhs`` is ``(T, p, p)``."""

    terms: list[Term]
    rhs: np.ndarray

    @property
    def size(self) -> int:
        return self.terms[0].leg.shape[0]


@dataclass
class StagedSdp:
    block_dim: int
    costs: np.ndarray  # (nblocks, N, N), shared by the batch
    stages: list[list[Family]]

    @property
    def num_blocks(self) -> int:
        return self.costs.shape[0]

    @property
    def batch(self) -> int:
        return self.stages[0][0].rhs.shape[0]

    def validate(self) -> None:
        nb = self.num_blocks
        for s, fams in enumerate(self.stages):
            for f in fams:
                p = f.size
                if f.rhs.shape[1:] != (p, p) or f.rhs.shape[0] != self.batch:
                    raise ValidationError(f"family in stage {s} has a malformed right-hand side")
                for t in f.terms:
                    if not 0 <= t.block < nb or t.leg.shape != (p, self.block_dim):
                        raise ValidationError(f"family in stage {s} references an invalid block")


@dataclass(frozen=True)
class IpmSettings:
    """Stopping rules.

    A member stops at ``tol`` on the relative primal residual, dual
    residual and duality gap. When progress stalls for ``patience``
    iterations, or at ``max_iter``, its best iterate is kept and counts as
    converged if it meets ``accept_tol``.
    """

    tol: float = 1e-8
    accept_tol: float = 1e-6
    max_iter: int = 100
    patience: int = 5
    step_fraction: float = 0.98


@dataclass
class IpmResult:
    X: np.ndarray  # (T, nblocks, N, N)
    y: list  # per stage, (T, rows)
    S: np.ndarray
    primal_obj: np.ndarray
    dual_obj: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    primal_residual: np.ndarray
    dual_residual: np.ndarray
    gap: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> np.ndarray:
        return np.maximum(np.maximum(self.primal_residual, self.dual_residual), self.gap)


class _Layout:
    """Row offsets and per-stage shared-block bookkeeping."""

    def __init__(self, prob: StagedSdp):
        self.prob = prob
        self.rows = []
        self.offsets = []
        for fams in prob.stages:
            offs, r = [], 0
            for f in fams:
                offs.append(r)
                r += f.size * (f.size + 1) // 2
            self.offsets.append(offs)
            self.rows.append(r)
        self.b_vec = [
            np.concatenate([svec(f.rhs) for f in fams], axis=1) for fams in prob.stages
        ]

    def apply(self, X: np.ndarray) -> list[np.ndarray]:
        """``A(X)`` as per-stage row vectors."""
        out = []
        for fams in self.prob.stages:
            parts = []
            for f in fams:
                acc = 0.0
                for t in f.terms:
                    acc = acc + t.sign * (t.leg @ X[:, t.block] @ t.leg.T)
                parts.append(svec(acc))
            out.append(np.concatenate(parts, axis=1))
        return out

    def adjoint(self, y: list[np.ndarray], batch: int) -> np.ndarray:
        """``A^T(y)`` as stacked blocks."""
        prob = self.prob
        out = np.zeros((batch, prob.num_blocks, prob.block_dim, prob.block_dim))
        for s, fams in enumerate(prob.stages):
            for f, off in zip(fams, self.offsets[s]):
                p = f.size
                m = smat(y[s][:, off : off + p * (p + 1) // 2], p)
                for t in f.terms:
                    out[:, t.block] += t.sign * (t.leg.T @ m @ t.leg)
        return out

    def schur_pair(self, fa: Family, fb: Family, X, Sinv) -> np.ndarray | None:
        """Schur block between two families, ``(T, ra, rb)``; ``None`` if disjoint."""
        pa, pb = fa.size, fb.size
        acc = None
        for ta in fa.terms:
            for tb in fb.terms:
                if ta.block != tb.block:
                    continue
                g1 = ta.leg @ X[:, ta.block] @ tb.leg.T
                g2 = ta.leg @ Sinv[:, ta.block] @ tb.leg.T
                kron = np.einsum("tik,tjl->tijkl", g1, g2).reshape(-1, pa * pa, pb * pb)
                blk = ta.sign * tb.sign * (_basis(pa) @ kron @ _basis(pb).T)
                acc = blk if acc is None else acc + blk
        return acc

    def schur(self, X, Sinv):
        """Diagonal and super-diagonal stage blocks of ``M_ij = <A_i, X A_j S^-1>``."""
        stages = self.prob.stages
        batch = X.shape[0]
        diag, upper = [], []
        for s, fams in enumerate(stages):
            r = self.rows[s]
            d = np.zeros((batch, r, r))
            for i, fa in enumerate(fams):
                oa = self.offsets[s][i]
                ra = fa.size * (fa.size + 1) // 2
                for j in range(i, len(fams)):
                    fb = fams[j]
                    blk = self.schur_pair(fa, fb, X, Sinv)
                    if blk is None:
                        continue
                    ob = self.offsets[s][j]
                    rb = fb.size * (fb.size + 1) // 2
                    d[:, oa : oa + ra, ob : ob + rb] = blk
                    if j != i:
                        d[:, ob : ob + rb, oa : oa + ra] = np.swapaxes(blk, 1, 2)
            diag.append(_sym(d))
            if s + 1 < len(stages):
                nxt = stages[s + 1]
                o = np.zeros((batch, r, self.rows[s + 1]))
                for i, fa in enumerate(fams):
                    oa = self.offsets[s][i]
                    ra = fa.size * (fa.size + 1) // 2
                    for j, fb in enumerate(nxt):
                        blk = self.schur_pair(fa, fb, X, Sinv)
                        if blk is None:
                            continue
                        ob = self.offsets[s + 1][j]
                        rb = fb.size * (fb.size + 1) // 2
                        o[:, oa : oa + ra, ob : ob + rb] = blk
                upper.append(o)
        return diag, upper


def _chol(m: np.ndarray) -> np.ndarray:
    """Batched Cholesky; members that fail get a small ridge, then a spectral clip."""
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        pass
    out = np.empty_like(m)
    eye = np.eye(m.shape[-1])
    for t in range(m.shape[0]):
        a = m[t]
        try:
            out[t] = np.linalg.cholesky(a)
            continue
        except np.linalg.LinAlgError:
            pass
        scale = max(float(np.abs(np.diag(a)).max()), 1e-300)
        for ridge in (1e-14, 1e-12, 1e-10, 1e-8):
            try:
                out[t] = np.linalg.cholesky(a + ridge * scale * eye)
                break
            except np.linalg.LinAlgError:
                continue
        else:
            lam, vec = np.linalg.eigh(_sym(a))
            if not np.all(np.isfinite(lam)):
                out[t] = np.nan
                continue
            lam = np.maximum(lam, 1e-8 * scale)
            out[t] = np.linalg.cholesky(_sym((vec * lam) @ vec.T))
    return out


class _TridiagFactor:
    """Block Cholesky of a symmetric positive definite block-tridiagonal matrix."""

    def __init__(self, diag, upper):
        self.diag = diag
        self.upper = upper
        self.linv = []
        self.w = []
        carry = None
        for s, d in enumerate(diag):
            if carry is not None:
                d = d - carry
            lower = _chol(d)
            linv = np.linalg.inv(lower)
            self.linv.append(linv)
            if s < len(upper):
                w = linv @ upper[s]
                self.w.append(w)
                carry = np.swapaxes(w, 1, 2) @ w

    def matvec(self, x: list[np.ndarray]) -> list[np.ndarray]:
        out = [np.einsum("tij,tj->ti", d, v) for d, v in zip(self.diag, x)]
        for s, u in enumerate(self.upper):
            out[s] = out[s] + np.einsum("tij,tj->ti", u, x[s + 1])
            out[s + 1] = out[s + 1] + np.einsum("tji,tj->ti", u, x[s])
        return out

    def solve(self, rhs: list[np.ndarray], refine: int = 2) -> list[np.ndarray]:
        """Solve with a few steps of iterative refinement against the unfactored matrix."""
        x = self._solve(rhs)
        for _ in range(refine):
            res = [r - m for r, m in zip(rhs, self.matvec(x))]
            x = [a + b for a, b in zip(x, self._solve(res))]
        return x

    def _solve(self, rhs: list[np.ndarray]) -> list[np.ndarray]:
        z = []
        prev = None
        for s, r in enumerate(rhs):
            if prev is not None:
                r = r - np.einsum("tji,tj->ti", self.w[s - 1], prev)
            prev = np.einsum("tij,tj->ti", self.linv[s], r)
            z.append(prev)
        out = [None] * len(rhs)
        nxt = None
        for s in range(len(rhs) - 1, -1, -1):
            r = z[s]
            if nxt is not None:
                r = r - np.einsum("tij,tj->ti", self.w[s], nxt)
            nxt = np.einsum("tji,tj->ti", self.linv[s], r)
            out[s] = nxt
        return out


def _max_step(X: np.ndarray, dX: np.ndarray) -> np.ndarray:
    """Largest ``a`` with ``X + a dX >= 0`` per batch member (``inf`` if unbounded)."""
    try:
        linv = np.linalg.inv(np.linalg.cholesky(X))
    except np.linalg.LinAlgError:
        # rounding pushed an iterate to the boundary: use a floored inverse root
        lam, vec = np.linalg.eigh(X)
        floor = 1e-14 * np.maximum(lam[..., -1:], 1e-300)
        linv = (vec / np.sqrt(np.maximum(lam, floor))[..., None, :]) @ np.swapaxes(vec, -1, -2)
    w = _sym(linv @ dX @ np.swapaxes(linv, -1, -2))
    bad = ~np.all(np.isfinite(w.reshape(w.shape[0], -1)), axis=1)
    w[bad] = 0.0
    lam = np.linalg.eigvalsh(w)[..., 0]
    lam = lam.min(axis=1)
    with np.errstate(divide="ignore"):
        return np.where(bad, 0.0, np.where(lam < 0, -1.0 / lam, np.inf))


def _inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.einsum("tbij,tbij->t", a, b)


def _norm_list(vs: list[np.ndarray]) -> np.ndarray:
    return np.sqrt(sum(np.sum(v * v, axis=1) for v in vs))


def _residuals(lay: _Layout, X, S, y, C, b, b_norm, c_norm):
    rp = [bb - a for bb, a in zip(b, lay.apply(X))]
    Rd = C - lay.adjoint(y, X.shape[0]) - S
    pobj = _inner(C, X)
    dobj = sum(np.sum(bb * yy, axis=1) for bb, yy in zip(b, y))
    rel_p = _norm_list(rp) / (1.0 + b_norm)
    rel_d = np.sqrt(np.einsum("tbij,tbij->t", Rd, Rd)) / (1.0 + c_norm)
    rel_g = np.abs(pobj - dobj) / (1.0 + np.abs(pobj) + np.abs(dobj))
    return rp, Rd, rel_p, rel_d, rel_g


def solve_staged_sdp(prob: StagedSdp, settings: IpmSettings = IpmSettings()) -> IpmResult:
    """Solve every batch member of ``prob``; see the module docstring for the form.

    Members are independent: a member whose iteration breaks down
    numerically is frozen at its best iterate without affecting the rest.
    """
    prob.validate()
    lay = _Layout(prob)
    batch, nb, n = prob.batch, prob.num_blocks, prob.block_dim
    C = np.broadcast_to(prob.costs, (batch, nb, n, n))
    b_norm = _norm_list(lay.b_vec)
    c_norm = float(np.sqrt(np.sum(prob.costs**2)))
    rhs_scale = np.array([np.abs(b).max() for b in lay.b_vec]).max(initial=1.0)
    xi = max(10.0, 10.0 * rhs_scale)
    eta = max(10.0, 10.0 * float(np.abs(prob.costs).max(initial=1.0)))
    eye = np.eye(n)
    X = np.broadcast_to(xi * eye, (batch, nb, n, n)).copy()
    S = np.broadcast_to(eta * eye, (batch, nb, n, n)).copy()
    y = [np.zeros((batch, r)) for r in lay.rows]
    total_dim = nb * n

    best = dict(X=X.copy(), S=S.copy(), y=[v.copy() for v in y])
    best_acc = np.full(batch, np.inf)
    best_res = np.full((3, batch), np.inf)
    since_best = np.zeros(batch, dtype=int)
    iters = np.zeros(batch, dtype=int)
    running = np.ones(batch, dtype=bool)
    broken = np.zeros(batch, dtype=bool)

    for it in range(settings.max_iter + 1):
        active = np.flatnonzero(running)
        if active.size == 0:
            break
        Xa, Sa, Ca = X[active], S[active], C[active]
        ya = [v[active] for v in y]
        ba = [v[active] for v in lay.b_vec]
        rp, Rd, rel_p, rel_d, rel_g = _residuals(lay, Xa, Sa, ya, Ca, ba, b_norm[active], c_norm)
        acc = np.maximum(np.maximum(rel_p, rel_d), rel_g)
        acc = np.where(np.isfinite(acc), acc, np.inf)
        better = acc < best_acc[active]
        upd = active[better]
        best["X"][upd], best["S"][upd] = Xa[better], Sa[better]
        for s_, v in enumerate(ya):
            best["y"][s_][upd] = v[better]
        best_acc[upd] = acc[better]
        best_res[:, upd] = np.vstack([rel_p, rel_d, rel_g])[:, better]
        since_best[active] = np.where(better, 0, since_best[active] + 1)
        stop = (acc < settings.tol) | (since_best[active] >= settings.patience) | ~np.isfinite(acc)
        running[active[stop]] = False
        if it == settings.max_iter or np.all(stop):
            break
        keep = ~stop
        active = active[keep]
        Xa, Sa, Rd = Xa[keep], Sa[keep], Rd[keep]
        rp = [v[keep] for v in rp]
        ya = [v[keep] for v in ya]
        iters[active] += 1
        m = active.size

        with np.errstate(all="ignore"):
            try:
                Sinv = _sym(np.linalg.inv(Sa))
            except np.linalg.LinAlgError:
                Sinv = _sym(np.linalg.pinv(Sa, hermitian=True))
            mu = _inner(Xa, Sa) / total_dim
            diag, upper = lay.schur(Xa, Sinv)
            fac = _TridiagFactor(diag, upper)
            XRdSi = _sym(Xa @ Rd @ Sinv)

            def direction(sigma_mu, corr):
                z = sigma_mu[:, None, None, None] * Sinv - Xa - XRdSi
                if corr is not None:
                    z = z - corr
                rhs = [r - a for r, a in zip(rp, lay.apply(z))]
                dy = fac.solve(rhs)
                dS = Rd - lay.adjoint(dy, m)
                dX = sigma_mu[:, None, None, None] * Sinv - Xa - _sym(Xa @ dS @ Sinv)
                if corr is not None:
                    dX = dX - corr
                return _sym(dX), dy, _sym(dS)

            def finite(*arrs):
                ok = np.ones(m, dtype=bool)
                for a in arrs:
                    ok &= np.all(np.isfinite(a.reshape(m, -1)), axis=1)
                return ok

            dXa, dya, dSa = direction(np.zeros(m), None)
            ok = finite(dXa, dSa)
            dXa[~ok], dSa[~ok] = 0.0, 0.0
            ap = np.minimum(1.0, _max_step(Xa, dXa))
            ad = np.minimum(1.0, _max_step(Sa, dSa))
            mu_aff = _inner(Xa + ap[:, None, None, None] * dXa, Sa + ad[:, None, None, None] * dSa) / total_dim
            sigma = np.clip((mu_aff / mu) ** 3, 0.0, 1.0)
            corr = _sym(dXa @ dSa @ Sinv)
            dX, dy, dS = direction(sigma * mu, corr)
            ok &= finite(dX, dS, *dy)
            dX[~ok], dS[~ok] = 0.0, 0.0
            for v in dy:
                v[~ok] = 0.0
            ap = np.minimum(1.0, settings.step_fraction * _max_step(Xa, dX))
            ad = np.minimum(1.0, settings.step_fraction * _max_step(Sa, dS))
        X[active] = Xa + ap[:, None, None, None] * dX
        S[active] = Sa + ad[:, None, None, None] * dS
        for s_ in range(len(y)):
            y[s_][active] = ya[s_] + ad[:, None] * dy[s_]
        broken[active[~ok]] = True
        running[active[~ok]] = False

    Xb, Sb, yb = best["X"], best["S"], best["y"]
    pobj = _inner(C, Xb)
    dobj = sum(np.sum(bb * yy, axis=1) for bb, yy in zip(lay.b_vec, yb))
    converged = best_acc <= settings.accept_tol
    return IpmResult(
        Xb, yb, Sb, pobj, dobj, iters, converged, best_res[0], best_res[1], best_res[2],
        {"broken": broken, "tol_met": best_acc < settings.tol},
    )
