"""Minimum-cost assignment on small nonnegative cost matrices (Kuhn-Munkres).

Rows are measured objects, columns are predictions. Rectangular inputs are
padded to square with a sentinel cost larger than any real entry; rows or
columns that land on padding are reported as unmatched.

The solver seeds its dual potentials with row and column reductions, then
grows the matching one row at a time along shortest augmenting paths. A
final pass walks the tight (zero reduced cost) edges to pick, among all
optimal matchings, the one whose column sequence is lexicographically
smallest, so equal-cost alternatives resolve to the lowest column index.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .smallmat import jit

INF = np.inf


class InvalidCostError(ValueError):
    pass


@dataclass(frozen=True)
class AssignmentResult:
    pairs: Tuple[Tuple[int, int], ...]
    unmatched_rows: Tuple[int, ...]
    unmatched_cols: Tuple[int, ...]
    total_cost: float


class HungarianWorkspace:
    """Reusable scratch arrays; grows only when a larger problem arrives."""

    def __init__(self, capacity: int = 16):
        self.capacity = 0
        self.ensure(capacity)

    def ensure(self, k: int) -> None:
        if k <= self.capacity:
            return
        cap = max(k, 2 * self.capacity)
        self.capacity = cap
        self.square = np.zeros((cap, cap))
        # rows: u, v, minv
        self.fbuf = np.zeros((3, cap + 1))
        # rows: way, p, used, r2c, c2r, queue, prev
        self.ibuf = np.zeros((7, cap + 1), dtype=np.int64)

    @property
    def r2c(self) -> np.ndarray:
        return self.ibuf[3]

    @property
    def c2r(self) -> np.ndarray:
        return self.ibuf[4]

    def arrays(self):
        return self.square, self.fbuf, self.ibuf


@jit
def _hungarian_square(c, k, u, v, minv, way, p, used, r2c, c2r):
    # potentials start from row then column reductions
    u[0] = 0.0
    v[0] = 0.0
    for i in range(k):
        m = c[i, 0]
        for j in range(1, k):
            if c[i, j] < m:
                m = c[i, j]
        u[i + 1] = m
    for j in range(k):
        m = c[0, j] - u[1]
        for i in range(1, k):
            d = c[i, j] - u[i + 1]
            if d < m:
                m = d
        v[j + 1] = m
    for j in range(k + 1):
        p[j] = 0
        way[j] = 0

    for i in range(1, k + 1):
        p[0] = i
        j0 = 0
        for j in range(k + 1):
            minv[j] = INF
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, k + 1):
                if used[j] == 0:
                    cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(k + 1):
                if used[j] != 0:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break

    for j in range(1, k + 1):
        r2c[p[j] - 1] = j - 1
        c2r[j - 1] = p[j] - 1


@jit
def _lex_smallest(c, k, u, v, r2c, c2r, seen, queue, prev, tol):
    """Move each row, in order, to the lowest tight column that still admits
    an optimal completion of the remaining rows."""
    for i in range(k):
        cur = r2c[i]
        for j in range(cur):
            if c[i, j] - u[i + 1] - v[j + 1] > tol:
                continue
            r = c2r[j]
            if r < i:
                continue
            for q in range(k):
                seen[q] = 0
            for q in range(i):
                seen[r2c[q]] = 1
            seen[j] = 1
            head = 0
            tail = 1
            queue[0] = r
            found = False
            while head < tail and not found:
                a = queue[head]
                head += 1
                for jj in range(k):
                    if seen[jj] != 0 or c[a, jj] - u[a + 1] - v[jj + 1] > tol:
                        continue
                    seen[jj] = 1
                    prev[jj] = a
                    if jj == cur:
                        found = True
                        break
                    queue[tail] = c2r[jj]
                    tail += 1
            if found:
                col = cur
                while True:
                    a = prev[col]
                    nxt = r2c[a]
                    r2c[a] = col
                    c2r[col] = a
                    if a == r:
                        break
                    col = nxt
                r2c[i] = j
                c2r[j] = i
                break


@jit
def solve_into(cost, n, m, square, fbuf, ibuf):
    """Solve the n x m top-left block of ``cost``; fills r2c/c2r over the
    padded k x k problem (k = max(n, m)). Entries >= m in r2c (>= n in c2r)
    mean unmatched."""
    k = max(n, m)
    hi = 0.0
    for i in range(n):
        for j in range(m):
            if cost[i, j] > hi:
                hi = cost[i, j]
    sentinel = 1.0 + n * m * hi
    for i in range(k):
        for j in range(k):
            square[i, j] = cost[i, j] if (i < n and j < m) else sentinel
    _solve_square(square, k, fbuf, ibuf, 1e-10 * (1.0 + sentinel))


@jit
def _solve_square(c, k, fbuf, ibuf, tol):
    u, v, minv = fbuf[0], fbuf[1], fbuf[2]
    way, p, used, r2c, c2r, queue, prev = ibuf[0], ibuf[1], ibuf[2], ibuf[3], ibuf[4], ibuf[5], ibuf[6]
    _hungarian_square(c, k, u, v, minv, way, p, used, r2c, c2r)
    # `used` doubles as the visited-column marker of the refinement pass
    _lex_smallest(c, k, u, v, r2c, c2r, used, queue, prev, tol)


def _validate(cost) -> np.ndarray:
    c = np.ascontiguousarray(cost, dtype=np.float64)
    if c.ndim != 2:
        raise InvalidCostError(f"cost matrix must be 2-d, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise InvalidCostError("cost matrix has NaN or infinite entries")
    if c.size and c.min() < 0:
        raise InvalidCostError("cost matrix has negative entries")
    return c


def _result(c: np.ndarray, r2c: np.ndarray, c2r: np.ndarray) -> AssignmentResult:
    n, m = c.shape
    pairs = tuple((i, int(r2c[i])) for i in range(n) if r2c[i] < m)
    return AssignmentResult(
        pairs=pairs,
        unmatched_rows=tuple(i for i in range(n) if r2c[i] >= m),
        unmatched_cols=tuple(j for j in range(m) if c2r[j] >= n),
        total_cost=float(sum(c[i, j] for i, j in pairs)),
    )


def solve_rectangular_padded(cost, ws: HungarianWorkspace | None = None) -> AssignmentResult:
    """Optimal matching of size min(n, m) via sentinel padding to square."""
    c = _validate(cost)
    n, m = c.shape
    if n == 0 or m == 0:
        return AssignmentResult((), tuple(range(n)), tuple(range(m)), 0.0)
    ws = ws or HungarianWorkspace(max(n, m))
    ws.ensure(max(n, m))
    solve_into(c, n, m, *ws.arrays())
    return _result(c, ws.r2c, ws.c2r)


def solve(cost, ws: HungarianWorkspace | None = None) -> AssignmentResult:
    """Minimum total cost assignment of rows to columns.

    Pairs are sorted by row. Among equally cheap matchings the one with the
    lexicographically smallest column sequence is returned.
    """
    c = _validate(cost)
    if c.shape[0] != c.shape[1]:
        return solve_rectangular_padded(c, ws)
    n = c.shape[0]
    if n == 0:
        return AssignmentResult((), (), (), 0.0)
    ws = ws or HungarianWorkspace(n)
    ws.ensure(n)
    _, fbuf, ibuf = ws.arrays()
    _solve_square(c, n, fbuf, ibuf, 1e-10 * (1.0 + c.max()))
    return _result(c, ws.r2c, ws.c2r)
