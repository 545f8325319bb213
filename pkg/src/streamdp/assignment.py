"""Maximum-weight linear assignment (Hungarian algorithm, O(n^3)).

Ties are resolved to the lexicographically smallest optimal permutation. Every
optimal permutation is a perfect matching on the edges that are tight for an
optimal dual (complementary slackness), so after the Hungarian pass the
matching is walked row by row, moving each row to its smallest tight column
whenever an alternating path over the not-yet-fixed rows allows it.
"""
from __future__ import annotations

import numpy as np

try:
    from numba import njit
except ImportError:  # pragma: no cover - pure-Python fallback
    njit = None


def _hungarian_min(cost):
    """Shortest-augmenting-path Hungarian method on a square cost matrix.

    Returns ``(row_to_col, u, v)`` with dual potentials satisfying
    ``u[i] + v[j] <= cost[i, j]`` and equality on matched pairs.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


if njit is not None:
    _hungarian_min = njit(cache=True)(_hungarian_min)


def _lexicographic_min(tight: np.ndarray, match: np.ndarray) -> np.ndarray:
    n = len(match)
    match = match.copy()
    owner = np.empty(n, dtype=np.int64)
    owner[match] = np.arange(n)
    frozen_cols = np.zeros(n, dtype=bool)
    adj = [np.flatnonzero(tight[i]) for i in range(n)]

    def reroute(row, target, seen):
        # find alternating path letting `row` (> i) move off its column towards `target`
        for c in adj[row]:
            if frozen_cols[c] or seen[c]:
                continue
            seen[c] = True
            if c == target or reroute(owner[c], target, seen):
                match[row] = c
                owner[c] = row
                return True
        return False

    for i in range(n):
        current = match[i]
        for c in adj[i]:
            if c >= current:
                break
            if frozen_cols[c]:
                continue
            r = owner[c]
            seen = np.zeros(n, dtype=bool)
            seen[c] = True
            # row i releases `current`; r must reach it through unfixed rows
            frozen_cols[c] = True
            ok = reroute(r, current, seen)
            frozen_cols[c] = False
            if ok:
                match[i] = c
                owner[c] = i
                break
        frozen_cols[match[i]] = True
    return match


def solve_lap(r) -> np.ndarray:
    """Permutation ``perm`` maximizing ``sum_k r[k, perm[k]]``.

    Among optimal permutations the lexicographically smallest is returned.
    """
    r = np.asarray(r, dtype=float)
    if r.ndim != 2 or r.shape[0] != r.shape[1]:
        raise ValueError(f"score matrix must be square, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("score matrix contains non-finite entries")
    n = r.shape[0]
    if n <= 1:
        return np.arange(n)
    cost = -r
    match, u, v = _hungarian_min(cost)
    reduced = cost - u[:, None] - v[None, :]
    # potentials stay on the scale of the competitive entries even when some
    # cells carry huge forbidding penalties
    scale = max(1.0, float(np.abs(u).max()), float(np.abs(v).max()))
    tight = reduced <= 1e-9 * scale
    return _lexicographic_min(tight, match)
