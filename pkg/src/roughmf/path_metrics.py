"""Controls and distances on discretized rough paths.

The grid IS the path: every supremum over partitions is taken over
grid-subordinate partitions only, so small grids admit exhaustive
oracles and the numbers here are exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridTooCoarseError, MismatchError
from .tensor_core import GroupElement, increment

# Table construction is O(G^3); larger grids should be handled piecewise.
MAX_TABLE_POINTS = 513


class RoughPathGrid:
    """A time grid with a group element at each grid time.

    Values are stored as stacked arrays ``lvl1`` (n, d) and ``lvl2``
    (n, d, d) (``lvl2 is None`` for level-1 paths); ``value(k)`` gives the
    k-th point as a :class:`GroupElement`.  Paths are based at the group
    identity; the state-space starting point lives in the RDE layer.
    """

    def __init__(self, times, lvl1, lvl2=None, p_hint=1.0):
        times = np.asarray(times, dtype=float)
        lvl1 = np.asarray(lvl1, dtype=float)
        if times.ndim != 1 or lvl1.ndim != 2 or lvl1.shape[0] != times.shape[0]:
            raise MismatchError("times (n,) and lvl1 (n, d) must align")
        if times.shape[0] < 1 or np.any(np.diff(times) <= 0):
            raise MismatchError("times must be strictly increasing")
        if p_hint < 1:
            raise MismatchError(f"p_hint must be >= 1, got {p_hint}")
        if np.any(lvl1[0] != 0.0):
            raise MismatchError("paths are based at the identity: lvl1[0] must be 0")
        if lvl2 is not None:
            lvl2 = np.asarray(lvl2, dtype=float)
            d = lvl1.shape[1]
            if lvl2.shape != (times.shape[0], d, d):
                raise MismatchError(f"lvl2 shape {lvl2.shape} != (n, {d}, {d})")
            if np.any(lvl2[0] != 0.0):
                raise MismatchError("paths are based at the identity: lvl2[0] must be 0")
        self.times = times
        self.lvl1 = lvl1
        self.lvl2 = lvl2
        self.p_hint = float(p_hint)
        for a in (self.times, self.lvl1, self.lvl2):
            if a is not None:
                a.setflags(write=False)

    @property
    def dim(self):
        return self.lvl1.shape[1]

    @property
    def level(self):
        return 1 if self.lvl2 is None else 2

    @property
    def n_times(self):
        return self.times.shape[0]

    def value(self, k) -> GroupElement:
        if self.lvl2 is None:
            return GroupElement(self.dim, 1, self.lvl1[k])
        return GroupElement(self.dim, 2, self.lvl1[k], self.lvl2[k])

    @property
    def values(self):
        return [self.value(k) for k in range(self.n_times)]

    def increment(self, i, j) -> GroupElement:
        return increment(self.value(i), self.value(j))

    def dilate(self, lam) -> "RoughPathGrid":
        """Group dilation of the whole path: level 1 times lam, level 2 times lam^2."""
        lvl2 = None if self.lvl2 is None else lam * lam * self.lvl2
        return RoughPathGrid(self.times, lam * self.lvl1, lvl2, p_hint=self.p_hint)

    def restrict(self, idx) -> "RoughPathGrid":
        """Sub-grid at the given strictly increasing indices (idx[0] must be 0)."""
        idx = np.asarray(idx, dtype=int)
        if idx[0] != 0:
            raise MismatchError("restriction must keep the base point")
        lvl2 = None if self.lvl2 is None else self.lvl2[idx]
        return RoughPathGrid(self.times[idx], self.lvl1[idx], lvl2, p_hint=self.p_hint)

    def max_group_defect(self):
        """Worst deviation of any grid value from group-likeness (relative)."""
        if self.lvl2 is None:
            return 0.0
        sym = 0.5 * (self.lvl2 + np.swapaxes(self.lvl2, 1, 2))
        half_sq = 0.5 * self.lvl1[:, :, None] * self.lvl1[:, None, :]
        defect = np.linalg.norm(sym - half_sq, axis=(1, 2))
        scale = np.maximum(1.0, np.einsum("ni,ni->n", self.lvl1, self.lvl1))
        scale = np.maximum(scale, np.linalg.norm(self.lvl2, axis=(1, 2)))
        return float(np.max(defect / scale))


def identity_path(times, dim, level=2) -> RoughPathGrid:
    """The constant path frozen at the group identity."""
    n = len(times)
    lvl2 = None if level == 1 else np.zeros((n, dim, dim))
    return RoughPathGrid(times, np.zeros((n, dim)), lvl2)


def _same_grid(x: RoughPathGrid, y: RoughPathGrid):
    if not np.array_equal(x.times, y.times):
        raise MismatchError("grids must share times (resampling is the caller's job)")
    if x.dim != y.dim or x.level != y.level:
        raise MismatchError("grids must share dim and level")


def _increment_lvl2(lvl1, lvl2, rows=None):
    """Pairwise level-2 increments inc[i, j] = x2_j - x2_i - x1_i (x) (x1_j - x1_i)."""
    if rows is None:
        rows = slice(None)
    cross = lvl1[rows, None, :, None] * (lvl1[None, :, :] - lvl1[rows, None, :])[:, :, None, :]
    return lvl2[None, :] - lvl2[rows, None] - cross


def hom_cost_matrix(path: RoughPathGrid, p: float) -> np.ndarray:
    """c[i, j] = hom_norm(increment(i, j))^p for i < j, zero elsewhere."""
    if p < 1:
        raise MismatchError(f"p must be >= 1, got {p}")
    n = path.n_times
    d1 = np.linalg.norm(path.lvl1[None, :, :] - path.lvl1[:, None, :], axis=2)
    if path.lvl2 is None:
        hom = d1
    else:
        # chunk rows so the (rows, n, d, d) increment tensor stays small
        chunk = max(1, int(4e6 // (n * path.dim * path.dim)))
        n2 = np.empty((n, n))
        for lo in range(0, n, chunk):
            rows = slice(lo, min(lo + chunk, n))
            inc2 = _increment_lvl2(path.lvl1, path.lvl2, rows)
            n2[rows] = np.linalg.norm(inc2, axis=(2, 3))
        hom = np.maximum(d1, np.sqrt(2.0 * n2))
    cost = hom**p
    return np.triu(cost, k=1)


@dataclass(frozen=True)
class ControlTable:
    """Upper-triangular table of omega(t_i, t_j), the p-variation to the p-th power.

    Built by a split recurrence processed in ascending interval length, so
    superadditivity pvar[i][k] + pvar[k][j] <= pvar[i][j] holds exactly in
    floating point (each such sum was a candidate in the max).
    """

    grid: RoughPathGrid
    p: float
    pvar: np.ndarray

    def omega(self, i, j):
        return float(self.pvar[i, j])


def control_table(path: RoughPathGrid, p: float) -> ControlTable:
    n = path.n_times
    if n > MAX_TABLE_POINTS:
        raise MismatchError(f"control table capped at {MAX_TABLE_POINTS} grid points, got {n}")
    cost = hom_cost_matrix(path, p)
    table = np.zeros((n, n))
    # diagonals by interval length; diag[m][i] = table[i, i + m]
    diags = [np.zeros(n)]
    for L in range(1, n):
        v = np.diagonal(cost, offset=L).copy()
        for m in range(1, L):
            v = np.maximum(v, diags[m][: n - L] + diags[L - m][m : m + n - L])
        diags.append(v)
        idx = np.arange(n - L)
        table[idx, idx + L] = v
    table.setflags(write=False)
    return ControlTable(path, p, table)


def _forward_dp(cost: np.ndarray, s: int, t: int) -> float:
    """max over partitions s = k_0 < ... < k_m = t of sum cost[k_i, k_{i+1}]."""
    m = t - s
    best = np.zeros(m + 1)
    sub = cost[s : t + 1, s : t + 1]
    for j in range(1, m + 1):
        best[j] = np.max(best[:j] + sub[:j, j])
    return float(best[m])


def p_variation(path: RoughPathGrid, p: float, s_idx: int = 0, t_idx: int | None = None) -> float:
    """omega(s, t): the exact grid supremum of sum ||increment||^p over partitions."""
    if t_idx is None:
        t_idx = path.n_times - 1
    if not 0 <= s_idx < t_idx <= path.n_times - 1:
        raise MismatchError(f"need 0 <= s_idx < t_idx, got {s_idx}, {t_idx}")
    cost = hom_cost_matrix(path, p)
    return _forward_dp(cost, s_idx, t_idx)


def m_alpha(path: RoughPathGrid, p: float, alpha: float, table: ControlTable | None = None) -> float:
    """Accumulated alpha-local variation: sup of sum omega over partitions
    whose every block satisfies omega(block) <= alpha.

    Raises :class:`GridTooCoarseError` when even a single grid step
    exceeds alpha, since no admissible partition resolves that step.
    """
    if alpha <= 0:
        raise MismatchError(f"alpha must be positive, got {alpha}")
    if table is None:
        table = control_table(path, p)
    elif table.grid is not path or table.p != p:
        raise MismatchError("control table does not belong to this path and p")
    n = path.n_times
    steps = np.diagonal(table.pvar, offset=1)
    bad = np.nonzero(steps > alpha)[0]
    if bad.size:
        k = int(bad[0])
        raise GridTooCoarseError(k, float(steps[k]), alpha)
    best = np.zeros(n)
    for j in range(1, n):
        w = table.pvar[:j, j]
        cand = np.where(w <= alpha, best[:j] + w, -np.inf)
        best[j] = np.max(cand)
    return float(best[-1])


def _base_distance(x: RoughPathGrid, y: RoughPathGrid) -> float:
    b = float(np.linalg.norm(x.lvl1[0] - y.lvl1[0]))
    if x.lvl2 is not None:
        b = max(b, float(np.linalg.norm(x.lvl2[0] - y.lvl2[0])))
    return b


def rho_p_var(x: RoughPathGrid, y: RoughPathGrid, p: float) -> float:
    """Inhomogeneous rough path distance on a shared grid.

    |x_0 - y_0| plus, maximised over tensor levels i, the partition
    supremum of sum |pi_i(x_inc - y_inc)|^(p/i), raised to i/p.
    """
    _same_grid(x, y)
    if p < 1:
        raise MismatchError(f"p must be >= 1, got {p}")
    n = x.n_times
    z = x.lvl1 - y.lvl1
    c1 = np.linalg.norm(z[None, :, :] - z[:, None, :], axis=2) ** p
    val = _forward_dp(np.triu(c1, k=1), 0, n - 1) ** (1.0 / p)
    if x.lvl2 is not None:
        d2 = _increment_lvl2(x.lvl1, x.lvl2) - _increment_lvl2(y.lvl1, y.lvl2)
        c2 = np.linalg.norm(d2, axis=(2, 3)) ** (p / 2.0)
        v2 = _forward_dp(np.triu(c2, k=1), 0, n - 1) ** (2.0 / p)
        val = max(val, v2)
    return _base_distance(x, y) + val


def rho_p_omega(x: RoughPathGrid, y: RoughPathGrid, p: float, omega: np.ndarray) -> float:
    """Modulus-form inhomogeneous distance with respect to a fixed control.

    |x_0 - y_0| plus the sup over grid pairs s < t of
    max_i |pi_i(x_inc - y_inc)| / omega(s, t)^(1/p); pairs the control
    does not see (omega = 0) are skipped.  Reported as a diagnostic only,
    never used for iteration control.
    """
    _same_grid(x, y)
    n = x.n_times
    if omega.shape != (n, n):
        raise MismatchError("control table must match the grid")
    z = x.lvl1 - y.lvl1
    gap = np.linalg.norm(z[None, :, :] - z[:, None, :], axis=2)
    if x.lvl2 is not None:
        d2 = _increment_lvl2(x.lvl1, x.lvl2) - _increment_lvl2(y.lvl1, y.lvl2)
        gap = np.maximum(gap, np.linalg.norm(d2, axis=(2, 3)))
    iu = np.triu_indices(n, k=1)
    w = omega[iu]
    ratios = gap[iu][w > 0] / w[w > 0] ** (1.0 / p)
    sup = float(ratios.max()) if ratios.size else 0.0
    return _base_distance(x, y) + sup


@dataclass(frozen=True)
class PvarBoundReport:
    p: float
    alpha: float
    lhs: float
    m_alpha: float
    rhs: float
    holds: bool


def pvar_bound_check(path: RoughPathGrid, p: float, alpha: float) -> PvarBoundReport:
    """Evaluate omega(0,T) <= 2^(p-1) alpha max{1, alpha^-p M_alpha^p} verbatim."""
    table = control_table(path, p)
    lhs = table.omega(0, path.n_times - 1)
    m = m_alpha(path, p, alpha, table=table)
    rhs = 2.0 ** (p - 1.0) * alpha * max(1.0, alpha ** (-p) * m**p)
    return PvarBoundReport(p, alpha, lhs, m, rhs, lhs <= rhs)


# ---------------------------------------------------------------------------
# batched pairwise distances (shared by the measure layer and experiments)


def _forward_dp_batch(cost: np.ndarray) -> np.ndarray:
    """Forward partition DP for a (B, n, n) stack of cost matrices."""
    B, n, _ = cost.shape
    best = np.zeros((B, n))
    for j in range(1, n):
        best[:, j] = np.max(best[:, :j] + cost[:, :j, j], axis=1)
    return best[:, -1]


def _level1_sq_costs(V, W):
    """|pi_1(x_inc - y_inc)|^2 over all index pairs, via Gram expansion.

    With z = V - W the level-1 increment difference is z_j - z_i, so the
    squared cost is zz_j + zz_i - 2 <z_i, z_j>: a single product of
    augmented factor matrices, never materializing (B, n, n, e).
    """
    z = V - W
    zz = np.einsum("pie,pie->pi", z, z)
    ones = np.ones_like(zz)
    L = np.concatenate([-2.0 * z, zz[:, :, None], ones[:, :, None]], axis=2)
    R = np.concatenate([z, ones[:, :, None], zz[:, :, None]], axis=2)
    sq = np.matmul(L, R.swapaxes(1, 2))
    return np.maximum(sq, 0.0, out=sq)


def _level2_sq_costs(V, W, U):
    """|pi_2(x_inc - y_inc)|_F^2 over all index pairs, via Gram expansion.

    For paths x (running parts V, A) and y (W, B) with U = A - B, the
    level-2 increment difference over [t_i, t_j] is

        D[i, j] = U_j - Q_i - (V_i (x) V_j - W_i (x) W_j),
        Q_i = U_i - V_i (x) V_i + W_i (x) W_i,

    and the squared Frobenius norm expands into Gram matrices of the
    per-time vectors and matrices, never materializing (B, n, n, e, e).
    The expansion costs a ~1e-8 absolute floor, immaterial at the
    tolerances the measure layer resolves.
    """
    B, n, e = V.shape
    z = V - W
    # Q_i = U_i - V_i (x) V_i + W_i (x) W_i, written in small-difference form
    Q = U - V[:, :, :, None] * z[:, :, None, :] - z[:, :, :, None] * W[:, :, None, :]
    Uf = U.reshape(B, n, e * e)
    Qf = Q.reshape(B, n, e * e)
    uu = np.einsum("pik,pik->pi", Uf, Uf)[:, :, None]
    qq = np.einsum("pik,pik->pi", Qf, Qf)[:, :, None]
    # R[i, j] = V_i (x) V_j - W_i (x) W_j = V_i (x) z_j + z_i (x) W_j keeps
    # every expansion term denominated in the small difference z
    uz = np.einsum("pjab,pjb->pja", U, z)  # U_j z_j
    uw = np.einsum("pjab,pjb->pja", U, W)  # U_j W_j
    qv = np.einsum("piab,pia->pib", Q, V)  # Q_i^T V_i
    qz = np.einsum("piab,pia->pib", Q, z)  # Q_i^T z_i
    vv = np.einsum("pie,pie->pi", V, V)[:, :, None]
    ww = np.einsum("pie,pie->pi", W, W)[:, :, None]
    zz = np.einsum("pie,pie->pi", z, z)[:, :, None]
    vz = np.einsum("pie,pie->pi", V, z)[:, :, None]
    zw = np.einsum("pie,pie->pi", z, W)[:, :, None]
    ones = np.ones_like(vv)
    # |D|^2 = |U_j|^2 + |Q_i|^2 + |R|^2 - 2<U_j,Q_i> - 2<U_j,R> + 2<Q_i,R>;
    # every term is (i-factor) . (j-factor): one product of augmented factors
    L = np.concatenate(
        [-2.0 * Qf, -2.0 * V, -2.0 * z, 2.0 * qv, 2.0 * qz, vv, 2.0 * vz, zz, qq, ones],
        axis=2,
    )
    R = np.concatenate([Uf, uz, uw, z, W, zz, zw, ww, ones, uu], axis=2)
    sq = np.matmul(L, R.swapaxes(1, 2))
    return np.maximum(sq, 0.0, out=sq)


def rho_pvar_pairs(stack_a, stack_b, idx_a, idx_b, p, block=16):
    """rho_p_var for a batch of path pairs drawn from two stacked ensembles.

    ``stack_x`` is a tuple (lvl1 (M, n, e), lvl2 (M, n, e, e) or None,
    base (M, e) or None); the pair list (idx_a[k], idx_b[k]) is gathered
    block by block.  Same recursion as :func:`rho_p_var`; the base arrays
    contribute the starting-point offset (solution paths carry their
    state start there).  Returns a (P,) vector.
    """
    l1a, l2a, base_a = stack_a
    l1b, l2b, base_b = stack_b
    idx_a = np.asarray(idx_a, dtype=int)
    idx_b = np.asarray(idx_b, dtype=int)
    P = idx_a.shape[0]
    out = np.zeros(P)
    for lo in range(0, P, block):
        ia = idx_a[lo : lo + block]
        ib = idx_b[lo : lo + block]
        V, W = l1a[ia], l1b[ib]
        # lower-triangle entries are never read by the forward DP
        c1 = _dyadic_power(_level1_sq_costs(V, W), p / 2.0)
        val = _forward_dp_batch(c1) ** (1.0 / p)
        if l2a is not None:
            U = l2a[ia] - l2b[ib]
            c2 = _dyadic_power(_level2_sq_costs(V, W, U), p / 4.0)
            val = np.maximum(val, _forward_dp_batch(c2) ** (2.0 / p))
        if base_a is not None:
            val = val + np.linalg.norm(base_a[ia] - base_b[ib], axis=1)
        out[lo : lo + block] = val
    return out


def _dyadic_power(x, q):
    """x**q for nonnegative x, via sqrt chains when 16 q is a small integer.

    Fractional np.power dominates the batched cost assembly; sqrt and
    multiply passes are several times cheaper.  Falls back to np.power
    for general exponents.  May clobber x.
    """
    k16 = q * 16.0
    if k16 != round(k16) or not 0 < k16 <= 64:
        return np.power(x, q, out=x)
    k = int(round(k16))
    acc = None
    root = x  # x^(16/16), then progressively square-rooted in place
    for weight in (16, 8, 4, 2, 1):
        if weight < 16:
            root = np.sqrt(root, out=root)
        for _ in range(k // weight):
            acc = root.copy() if acc is None else np.multiply(acc, root, out=acc)
        k -= (k // weight) * weight
        if k == 0:
            break
    return acc
