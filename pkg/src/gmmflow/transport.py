"""Linear programs over transportation polytopes.

Two-axis problems use an in-repo transportation simplex (northwest-corner
start, potentials for reduced costs, partial Dantzig pricing that switches to
Bland's smallest-index rule after a long run of degenerate pivots). Problems with more
than two axes go through HiGHS' dual simplex, which also returns a vertex.
"""

from __future__ import annotations

from dataclasses import dataclass


import numpy as np

from ._jit import maybe_njit
from .errors import InfeasibleError, NumericalError, ValidationError

WEIGHT_SUM_TOL = 1e-6


@maybe_njit
def _northwest_corner(supply, demand, bi, bj, bx):
    m = supply.shape[0]
    n = demand.shape[0]
    s = supply.copy()
    d = demand.copy()
    i = 0
    j = 0
    k = 0
    while True:
        q = min(s[i], d[j])
        if q < 0.0:
            q = 0.0
        bi[k] = i
        bj[k] = j
        bx[k] = q
        s[i] -= q
        d[j] -= q
        k += 1
        if i == m - 1 and j == n - 1:
            break
        if j == n - 1 or (i < m - 1 and s[i] <= d[j]):
            i += 1
        else:
            j += 1
    return k


@maybe_njit
def _tree_order(m, n, bi, bj, nb, root_row):
    """Breadth-first order of the basis spanning tree rooted at a row node.

    Nodes 0..m-1 are rows and m..m+n-1 columns. Returns (order, parent_node,
    parent_edge) with -1 for the root.
    """
    nodes = m + n
    deg = np.zeros(nodes + 1, dtype=np.int64)
    for k in range(nb):
        deg[bi[k] + 1] += 1
        deg[m + bj[k] + 1] += 1
    for v in range(nodes):
        deg[v + 1] += deg[v]
    fill = deg[:-1].copy()
    adj_edge = np.empty(2 * nb, dtype=np.int64)
    for k in range(nb):
        a = bi[k]
        b = m + bj[k]
        adj_edge[fill[a]] = k
        fill[a] += 1
        adj_edge[fill[b]] = k
        fill[b] += 1
    parent = np.full(nodes, -2, dtype=np.int64)
    pedge = np.full(nodes, -1, dtype=np.int64)
    order = np.empty(nodes, dtype=np.int64)
    parent[root_row] = -1
    order[0] = root_row
    head = 0
    tail = 1
    while head < tail:
        v = order[head]
        head += 1
        for p in range(deg[v], deg[v + 1]):
            k = adj_edge[p]
            w = m + bj[k] if v < m else bi[k]
            if parent[w] == -2:
                parent[w] = v
                pedge[w] = k
                order[tail] = w
                tail += 1
    return order, parent, pedge, tail


@maybe_njit
def _transport_simplex(cost, supply, demand, max_iter):
    m, n = cost.shape
    nb = m + n - 1
    bi = np.empty(nb, dtype=np.int64)
    bj = np.empty(nb, dtype=np.int64)
    bx = np.empty(nb, dtype=np.float64)
    _northwest_corner(supply, demand, bi, bj, bx)
    in_basis = np.zeros((m, n), dtype=np.bool_)
    for k in range(nb):
        in_basis[bi[k], bj[k]] = True
    scale = 0.0
    for i in range(m):
        for j in range(n):
            if abs(cost[i, j]) > scale:
                scale = abs(cost[i, j])
    tol = 1e-12 * max(scale, 1.0)
    u = np.empty(m)
    v = np.empty(n)
    bland = False
    it = 0
    status = 1
    cursor = 0
    degenerate_run = 0
    block = max(64, int(np.sqrt(m * n)))
    while it < max_iter:
        order, parent, pedge, count = _tree_order(m, n, bi, bj, nb, 0)
        if count != m + n:
            status = 2
            break
        u[0] = 0.0
        for p in range(1, count):
            w = order[p]
            k = pedge[w]
            if w < m:
                u[w] = cost[bi[k], bj[k]] - v[bj[k]]
            else:
                v[w - m] = cost[bi[k], bj[k]] - u[bi[k]]
        ei = -1
        ej = -1
        best = -tol
        if bland:
            for i in range(m):
                for j in range(n):
                    if not in_basis[i, j] and cost[i, j] - u[i] - v[j] < -tol:
                        ei = i
                        ej = j
                        break
                if ei >= 0:
                    break
        else:
            # partial pricing: scan cyclically, stop after the first block with a candidate
            total = m * n
            scanned = 0
            pos = cursor
            while scanned < total:
                stop = min(scanned + block, total)
                while scanned < stop:
                    i = pos // n
                    j = pos - i * n
                    if not in_basis[i, j]:
                        r = cost[i, j] - u[i] - v[j]
                        if r < best:
                            best = r
                            ei = i
                            ej = j
                    pos += 1
                    if pos == total:
                        pos = 0
                    scanned += 1
                if ei >= 0:
                    break
            cursor = pos
        if ei < 0:
            status = 0
            break
        # cycle: entering cell plus the tree path from column ej back to row ei
        order, parent, pedge, count = _tree_order(m, n, bi, bj, nb, ei)
        path = np.empty(m + n, dtype=np.int64)
        plen = 0
        w = m + ej
        while parent[w] != -1:
            path[plen] = pedge[w]
            plen += 1
            w = parent[w]
        theta = np.inf
        leave = -1
        for p in range(0, plen, 2):
            k = path[p]
            idx_k = bi[k] * n + bj[k]
            if bx[k] < theta or (bx[k] == theta and idx_k < bi[leave] * n + bj[leave]):
                theta = bx[k]
                leave = k
        for p in range(plen):
            k = path[p]
            if p % 2 == 0:
                bx[k] -= theta
            else:
                bx[k] += theta
        in_basis[bi[leave], bj[leave]] = False
        bi[leave] = ei
        bj[leave] = ej
        bx[leave] = theta
        in_basis[ei, ej] = True
        # Bland's rule only after a long run of degenerate pivots (anti-cycling)
        if theta <= 1e-15:
            degenerate_run += 1
        else:
            degenerate_run = 0
        bland = degenerate_run > m + n
        it += 1
    flow = np.zeros((m, n))
    for k in range(nb):
        flow[bi[k], bj[k]] += max(bx[k], 0.0)
    return flow, it, status


@dataclass(frozen=True)
class TransportPlan:
    """Sparse coupling between two discrete weight vectors.

    ``rows``, ``cols`` and ``lam`` list the support; every ``lam`` entry is
    strictly positive.
    """

    rows: np.ndarray
    cols: np.ndarray
    lam: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray
    objective: float
    iterations: int = 0

    @property
    def shape(self) -> tuple[int, int]:
        return self.source_weights.shape[0], self.target_weights.shape[0]

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.rows, self.cols] = self.lam
        return out

    def __len__(self) -> int:
        return self.lam.shape[0]

    def to_list(self) -> list[dict]:
        return [{"i": int(i), "j": int(j), "lambda": float(v)} for i, j, v in zip(self.rows, self.cols, self.lam)]


def _check_weights(w, name) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size == 0 or np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValidationError(f"{name} must be a nonnegative finite vector")
    return w


def solve_transport_lp(costs, alpha0, alpha1, max_iter: int | None = None) -> TransportPlan:
    """Optimal basic solution of ``min <lam, costs>`` over couplings of two weight vectors.

    Raises
    ------
    ValidationError
        If the weight totals differ by more than 1e-6 or costs are not finite.
    """
    costs = np.asarray(costs, dtype=float)
    a = _check_weights(alpha0, "alpha0")
    b = _check_weights(alpha1, "alpha1")
    if costs.shape != (a.size, b.size):
        raise ValidationError(f"cost shape {costs.shape} does not match weights {(a.size, b.size)}")
    if not np.all(np.isfinite(costs)):
        raise ValidationError("costs must be finite")
    if abs(a.sum() - b.sum()) > WEIGHT_SUM_TOL:
        raise ValidationError("source and target weights have different totals")
    b = b * (a.sum() / b.sum())
    if max_iter is None:
        max_iter = 50 * (a.size + b.size) * max(a.size, b.size) + 1000
    flow, iters, status = _transport_simplex(np.ascontiguousarray(costs), a, b, max_iter)
    if status != 0:
        raise NumericalError(f"transportation simplex failed (status {status})")
    rows, cols = np.nonzero(flow > 0.0)
    lam = flow[rows, cols]
    objective = float(np.sum(lam * costs[rows, cols]))
    return TransportPlan(rows, cols, lam, a, b, objective, int(iters))


@dataclass(frozen=True)
class MultiPlan:
    """Sparse coupling over index tuples of several discrete weight vectors."""

    indices: np.ndarray  # (S, M) integer tuples
    lam: np.ndarray
    weights: tuple
    objective: float

    def axis_sums(self) -> list[np.ndarray]:
        out = []
        for j, w in enumerate(self.weights):
            s = np.zeros(w.shape[0])
            np.add.at(s, self.indices[:, j], self.lam)
            out.append(s)
        return out

    def to_list(self) -> list[dict]:
        return [{"idx": [int(v) for v in idx], "lambda": float(l)} for idx, l in zip(self.indices, self.lam)]


def axis_sum_matrix(shape: tuple[int, ...]) -> np.ndarray:
    """Dense constraint matrix mapping a flattened tensor to its axis sums."""
    total = int(np.prod(shape))
    rows = []
    grid = np.indices(shape).reshape(len(shape), total)
    for j, nj in enumerate(shape):
        for k in range(nj):
            rows.append((grid[j] == k).astype(float))
    return np.array(rows)


def solve_mm_lp(costs, weights) -> MultiPlan:
    """Optimal vertex of the multi-axis transportation LP.

    Parameters
    ----------
    costs : ndarray of shape (N_1, ..., N_M)
        Tuple costs; ``+inf`` marks a forbidden tuple.
    weights : sequence of M weight vectors
        Axis marginals, each summing to one.
    """
    costs = np.asarray(costs, dtype=float)
    ws = [_check_weights(w, f"weights[{j}]") for j, w in enumerate(weights)]
    if costs.ndim != len(ws) or costs.shape != tuple(w.size for w in ws):
        raise ValidationError("cost tensor shape does not match the weight vectors")
    if any(abs(w.sum() - 1.0) > WEIGHT_SUM_TOL for w in ws):
        raise ValidationError("each weight vector must sum to 1")
    ws = [w / w.sum() for w in ws]
    if np.any(np.isnan(costs)) or np.any(costs == -np.inf):
        raise ValidationError("costs must be finite or +inf")
    allowed = np.isfinite(costs)
    for j, w in enumerate(ws):
        reach = allowed.any(axis=tuple(a for a in range(costs.ndim) if a != j))
        if np.any((w > 0) & ~reach):
            raise InfeasibleError(f"axis {j} has a weighted index with no finite-cost tuple")
    if costs.ndim == 2:
        finite = np.where(allowed, costs, 0.0)
        big = (np.abs(finite).max() + 1.0) * 1e6
        plan = solve_transport_lp(np.where(allowed, costs, big), ws[0], ws[1])
        if np.any(~allowed[plan.rows, plan.cols]):
            raise InfeasibleError("no coupling avoids forbidden tuples")
        idx = np.column_stack([plan.rows, plan.cols])
        return MultiPlan(idx, plan.lam, tuple(ws), plan.objective)
    return _solve_mm_highs(costs, allowed, ws)


def _solve_mm_highs(costs, allowed, ws) -> MultiPlan:
    from scipy.optimize import linprog

    shape = costs.shape
    a_eq = axis_sum_matrix(shape)
    b_eq = np.concatenate(ws)
    c = np.where(allowed, costs, 0.0).ravel()
    bounds = np.column_stack([np.zeros(c.size), np.where(allowed.ravel(), np.inf, 0.0)])
    res = linprog(c, A_eq=a_eq, b_eq=b_eq, bounds=bounds, method="highs-ds")
    if res.status == 2:
        raise InfeasibleError("multi-axis transport LP is infeasible")
    if res.status != 0:
        raise NumericalError(f"multi-axis transport LP failed: {res.message}")
    x = np.where(res.x > 1e-13, res.x, 0.0)
    support = np.flatnonzero(x)
    # polish: re-solve the axis-sum equations on the vertex support
    sub = a_eq[:, support]
    polished, *_ = np.linalg.lstsq(sub, b_eq, rcond=None)
    if np.all(polished > 0) and np.max(np.abs(sub @ polished - b_eq)) <= np.max(np.abs(sub @ x[support] - b_eq)):
        x[support] = polished
    idx = np.array(np.unravel_index(support, shape)).T
    lam = x[support]
    return MultiPlan(idx, lam, tuple(ws), float(np.sum(lam * costs.ravel()[support])))


__all__ = [
    "TransportPlan",
    "MultiPlan",
    "solve_transport_lp",
    "solve_mm_lp",
    "axis_sum_matrix",
]
