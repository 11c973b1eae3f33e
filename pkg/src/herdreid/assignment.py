"""Linear assignment by the Hungarian method (shortest augmenting paths)."""

from __future__ import annotations

import numpy as np

__all__ = ["hungarian_assign", "assignment_cost"]


def hungarian_assign(cost) -> list:
    """Minimum-cost assignment for an ``n x m`` cost matrix.

    Returns a list of ``(row, col)`` pairs sorted by row; ``min(n, m)`` pairs
    are produced. Rows are inserted in index order and columns are scanned
    in ascending order, so equal-cost ties always resolve the same way.
    """
    c = np.asarray(cost, dtype=float)
    if c.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")
    n, m = c.shape
    if n == 0 or m == 0:
        return []
    if n > m:
        return sorted((r, cl) for cl, r in hungarian_assign(c.T))

    # potentials u (rows), v (cols); p[j] = row matched to column j (1-based)
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = c[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = [(int(p[j]) - 1, j - 1) for j in range(1, m + 1) if p[j] != 0]
    return sorted(pairs)


def assignment_cost(cost, pairs) -> float:
    c = np.asarray(cost, dtype=float)
    return float(sum(c[i, j] for i, j in pairs))
