"""Exhaustive oracles and random-path generators shared across the suite.

Everything here is deliberately naive: enumerate every grid-subordinate
partition and take the supremum directly.  Only usable on small grids.
"""

from itertools import combinations

import numpy as np

from roughmf.path_metrics import RoughPathGrid
from roughmf.tensor_core import hom_norm, signature_arrays


def all_partitions(s, t):
    """Every partition s = k_0 < ... < k_m = t using grid indices."""
    interior = range(s + 1, t)
    for r in range(0, t - s):
        for mid in combinations(interior, r):
            yield (s, *mid, t)


def hom_cost_table(grid, p):
    """c[i, j] = hom_norm(increment(i, j))^p by direct group arithmetic."""
    n = grid.n_times
    c = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            c[i, j] = hom_norm(grid.increment(i, j)) ** p
    return c


def brute_omega_table(grid, p):
    """omega(i, j) by exhaustive partition enumeration."""
    n = grid.n_times
    c = hom_cost_table(grid, p)
    omega = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            best = 0.0
            for part in all_partitions(i, j):
                best = max(best, sum(c[a, b] for a, b in zip(part, part[1:])))
            omega[i, j] = best
    return omega


def brute_p_variation(grid, p, s=0, t=None):
    if t is None:
        t = grid.n_times - 1
    return brute_omega_table(grid, p)[s, t]


def brute_m_alpha(grid, p, alpha):
    """Exhaustive accumulated alpha-local variation (None if no admissible
    partition resolves some step)."""
    n = grid.n_times
    omega = brute_omega_table(grid, p)
    if any(omega[k, k + 1] > alpha for k in range(n - 1)):
        return None
    best = None
    for part in all_partitions(0, n - 1):
        blocks = list(zip(part, part[1:]))
        if all(omega[a, b] <= alpha for a, b in blocks):
            total = sum(omega[a, b] for a, b in blocks)
            best = total if best is None else max(best, total)
    return best


def brute_rho(x, y, p):
    """Exhaustive inhomogeneous distance on a shared grid."""
    n = x.n_times
    base = float(np.linalg.norm(x.lvl1[0] - y.lvl1[0]))
    if x.lvl2 is not None:
        base = max(base, float(np.linalg.norm(x.lvl2[0] - y.lvl2[0])))
    levels = []
    for level in (1, 2):
        if level == 2 and x.lvl2 is None:
            break
        c = np.zeros((n, n))
        for i in range(n):
            for j in range(i + 1, n):
                xi, yi = x.increment(i, j), y.increment(i, j)
                if level == 1:
                    gap = np.linalg.norm(xi.lvl1 - yi.lvl1)
                else:
                    gap = np.linalg.norm(xi.lvl2 - yi.lvl2)
                c[i, j] = gap ** (p / level)
        best = 0.0
        for part in all_partitions(0, n - 1):
            best = max(best, sum(c[a, b] for a, b in zip(part, part[1:])))
        levels.append(best ** (level / p))
    return base + max(levels)


def random_walk_grid(rng, n, d, level=2, scale=1.0, area_twist=0.0):
    """Signature of a random walk, optionally with artificial extra areas.

    ``area_twist`` adds a random antisymmetric drift to the level-2 part,
    leaving the identity base point intact; the metrics must cope with
    any grid values, group-like or not.
    """
    pts = np.vstack([np.zeros((1, d)), np.cumsum(scale * rng.standard_normal((n - 1, d)), axis=0)])
    lvl1, lvl2 = signature_arrays(pts, level)
    times = np.linspace(0.0, 1.0, n)
    if level == 1:
        return RoughPathGrid(times, lvl1)
    if area_twist:
        a = area_twist * rng.standard_normal((n, d, d))
        a[0] = 0.0
        lvl2 = lvl2 + (a - np.swapaxes(a, 1, 2))
    return RoughPathGrid(times, lvl1, lvl2)


def random_group_element(rng, d, scale=1.0):
    """A random group-like element (signature of a short random walk)."""
    grid = random_walk_grid(rng, 4, d, scale=scale)
    return grid.value(3)
