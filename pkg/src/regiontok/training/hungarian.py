"""Minimum-cost one-to-one assignment via shortest augmenting paths (O(n^2 m))."""

from __future__ import annotations

import math

import numpy as np


def _solve_rows_le_cols(cost: np.ndarray) -> list[int]:
    """Assign every row of an n x m matrix (n <= m); returns column per row."""
    n, m = cost.shape
    inf = math.inf
    # 1-based potentials; column 0 is the virtual start
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match_col = [0] * (m + 1)  # row matched to column j (0 = free)
    way = [0] * (m + 1)
    c = cost.tolist()
    for i in range(1, n + 1):
        match_col[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            row = c[i0 - 1]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1
    assign = [-1] * n
    for j in range(1, m + 1):
        if match_col[j]:
            assign[match_col[j] - 1] = j - 1
    return assign


def hungarian_match(cost) -> list[tuple[int, int]]:
    """Optimal assignment of size min(rows, cols) as sorted (row, col) pairs."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if cost.size == 0:
        return []
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    if n <= m:
        return [(i, j) for i, j in enumerate(_solve_rows_le_cols(cost))]
    cols = _solve_rows_le_cols(cost.T)
    return sorted((i, j) for j, i in enumerate(cols))


def assignment_cost(cost, pairs) -> float:
    cost = np.asarray(cost, dtype=np.float64)
    return float(sum(cost[i, j] for i, j in pairs))
