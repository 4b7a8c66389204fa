"""Arithmetic of the step-2 truncated tensor algebra and free nilpotent group.

A level-2 group element stores the first two graded parts of a truncated
tensor series whose scalar part is identically 1.  Group-like elements
(those in the step-2 free nilpotent group) additionally satisfy

    sym(lvl2) = 1/2 * lvl1 (x) lvl1,

and every piecewise-linear signature produced here is group-like by
construction.  Each graded part carries the Euclidean/Frobenius norm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidElementError, MismatchError

GROUP_LIKE_RTOL = 1e-12


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GroupElement:
    """A point of the step-N free nilpotent group over R^d, N in {1, 2}.

    ``lvl1`` is the level-1 tensor (a d-vector), ``lvl2`` the level-2
    tensor (a d x d matrix), absent when ``level == 1``.  Instances are
    immutable and freely shareable across threads.
    """

    dim: int
    level: int
    lvl1: np.ndarray
    lvl2: np.ndarray | None = None

    def __post_init__(self):
        if self.level not in (1, 2):
            raise MismatchError(f"level must be 1 or 2, got {self.level}")
        lvl1 = _readonly(self.lvl1)
        if lvl1.shape != (self.dim,):
            raise MismatchError(f"lvl1 shape {lvl1.shape} != ({self.dim},)")
        object.__setattr__(self, "lvl1", lvl1)
        if self.level == 2:
            if self.lvl2 is None:
                raise MismatchError("level-2 element requires lvl2")
            lvl2 = _readonly(self.lvl2)
            if lvl2.shape != (self.dim, self.dim):
                raise MismatchError(f"lvl2 shape {lvl2.shape} != ({self.dim}, {self.dim})")
            object.__setattr__(self, "lvl2", lvl2)
        elif self.lvl2 is not None:
            raise MismatchError("level-1 element must not carry lvl2")

    @staticmethod
    def identity(dim, level=2):
        if level == 1:
            return GroupElement(dim, 1, np.zeros(dim))
        return GroupElement(dim, 2, np.zeros(dim), np.zeros((dim, dim)))

    @staticmethod
    def group_like(lvl1, area=None):
        """Group-like element with given level-1 part and antisymmetric area.

        The symmetric level-2 part is forced to half the square of level 1,
        so the result lies in the step-2 group whatever ``area`` is.
        """
        lvl1 = np.asarray(lvl1, dtype=float)
        d = lvl1.shape[0]
        a = np.zeros((d, d)) if area is None else np.asarray(area, dtype=float)
        a = 0.5 * (a - a.T)
        return GroupElement(d, 2, lvl1, 0.5 * np.outer(lvl1, lvl1) + a)

    @staticmethod
    def segment(delta):
        """Signature of a single straight line segment with increment ``delta``."""
        return GroupElement.group_like(delta)

    def group_defect(self):
        """Frobenius distance of sym(lvl2) from half the square of lvl1."""
        if self.level == 1:
            return 0.0
        sym = 0.5 * (self.lvl2 + self.lvl2.T)
        return float(np.linalg.norm(sym - 0.5 * np.outer(self.lvl1, self.lvl1)))

    def is_group_like(self, rtol=GROUP_LIKE_RTOL):
        scale = max(1.0, float(np.dot(self.lvl1, self.lvl1)))
        if self.level == 2:
            scale = max(scale, float(np.linalg.norm(self.lvl2)))
        return self.group_defect() <= rtol * scale


@dataclass(frozen=True)
class LieElement:
    """An element of the step-2 free Lie algebra: a vector plus an area part.

    ``lvl2a`` is stored exactly antisymmetric (it is antisymmetrised on
    construction, which is an exact float operation).
    """

    dim: int
    level: int
    lvl1: np.ndarray
    lvl2a: np.ndarray | None = None

    def __post_init__(self):
        if self.level not in (1, 2):
            raise MismatchError(f"level must be 1 or 2, got {self.level}")
        lvl1 = _readonly(self.lvl1)
        if lvl1.shape != (self.dim,):
            raise MismatchError(f"lvl1 shape {lvl1.shape} != ({self.dim},)")
        object.__setattr__(self, "lvl1", lvl1)
        if self.level == 2:
            if self.lvl2a is None:
                raise MismatchError("level-2 Lie element requires lvl2a")
            a = np.array(self.lvl2a, dtype=float)
            if a.shape != (self.dim, self.dim):
                raise MismatchError(f"lvl2a shape {a.shape} != ({self.dim}, {self.dim})")
            object.__setattr__(self, "lvl2a", _readonly(0.5 * (a - a.T)))
        elif self.lvl2a is not None:
            raise MismatchError("level-1 Lie element must not carry lvl2a")


def _check_pair(a, b):
    if a.dim != b.dim or a.level != b.level:
        raise MismatchError(
            f"mismatched elements: dim {a.dim} vs {b.dim}, level {a.level} vs {b.level}"
        )


def tensor_mul(a: GroupElement, b: GroupElement) -> GroupElement:
    """Truncated tensor (Chen) product of two elements."""
    _check_pair(a, b)
    lvl1 = a.lvl1 + b.lvl1
    if a.level == 1:
        return GroupElement(a.dim, 1, lvl1)
    lvl2 = a.lvl2 + b.lvl2 + np.outer(a.lvl1, b.lvl1)
    return GroupElement(a.dim, 2, lvl1, lvl2)


def inverse(g: GroupElement) -> GroupElement:
    """Group inverse: g (x) inverse(g) = identity."""
    if g.level == 1:
        return GroupElement(g.dim, 1, -g.lvl1)
    return GroupElement(g.dim, 2, -g.lvl1, -g.lvl2 + np.outer(g.lvl1, g.lvl1))


def increment(g_s: GroupElement, g_t: GroupElement) -> GroupElement:
    """Group increment inverse(g_s) (x) g_t of a path between two times."""
    _check_pair(g_s, g_t)
    return tensor_mul(inverse(g_s), g_t)


def exp(a: LieElement) -> GroupElement:
    """Exponential of a step-2 Lie element (closed form, no BCH tail)."""
    if a.level == 1:
        return GroupElement(a.dim, 1, a.lvl1.copy())
    lvl2 = a.lvl2a + 0.5 * np.outer(a.lvl1, a.lvl1)
    return GroupElement(a.dim, 2, a.lvl1.copy(), lvl2)


def log(g: GroupElement, rtol=GROUP_LIKE_RTOL) -> LieElement:
    """Logarithm of a group-like element; inverts :func:`exp` to roundoff.

    Rejects elements whose symmetric level-2 part strays from half the
    square of level 1 by more than ``rtol`` (relative to the element
    size).  For group-like input the area part is the antisymmetric part
    of level 2, which the LieElement constructor extracts.
    """
    if g.level == 1:
        return LieElement(g.dim, 1, g.lvl1.copy())
    if not g.is_group_like(rtol):
        raise InvalidElementError("log of a non-group-like element", g.group_defect())
    return LieElement(g.dim, 2, g.lvl1.copy(), g.lvl2)


def dilate(g: GroupElement, lam: float) -> GroupElement:
    """Tensor dilation: level 1 scales by lam, level 2 by lam squared."""
    if g.level == 1:
        return GroupElement(g.dim, 1, lam * g.lvl1)
    return GroupElement(g.dim, 2, lam * g.lvl1, lam * lam * g.lvl2)


def hom_norm(g: GroupElement, p: float = 2.0) -> float:
    """A fixed homogeneous norm: max(|lvl1|, sqrt(2 |lvl2|)).

    Homogeneous of degree one under dilations and equivalent to the
    Carnot-Caratheodory norm up to constants, which is all the variation
    machinery relies on.  ``p`` is accepted for interface uniformity with
    the p-indexed metric family and only validated.
    """
    if p < 1:
        raise MismatchError(f"p must be >= 1, got {p}")
    n1 = float(np.linalg.norm(g.lvl1))
    if g.level == 1:
        return n1
    n2 = float(np.sqrt(2.0 * np.linalg.norm(g.lvl2)))
    return max(n1, n2)


def signature_arrays(points, level):
    """Running piecewise-linear signature as stacked arrays.

    Returns ``(lvl1, lvl2)`` of shapes (n, d) and (n, d, d) (lvl2 is None
    for level 1), the signature over [t_0, t_k] at each breakpoint.
    Equivalent to chaining per-segment closed forms with the group product.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[0] < 2:
        raise MismatchError("signature needs at least 2 points of shape (n, d)")
    lvl1 = pts - pts[0]
    if level == 1:
        return lvl1, None
    deltas = np.diff(pts, axis=0)
    # per-step increment of the running level 2: x1_k (x) delta_k + 1/2 delta_k^2
    steps = lvl1[:-1, :, None] * deltas[:, None, :] + 0.5 * deltas[:, :, None] * deltas[:, None, :]
    lvl2 = np.concatenate([np.zeros((1,) + steps.shape[1:]), np.cumsum(steps, axis=0)])
    return lvl1, lvl2


def signature_pl(points, level, times=None):
    """Running signature of a piecewise-linear path at each breakpoint.

    ``points`` is an (n, d) array of states; ``times`` defaults to the
    uniform grid on [0, 1].  The output grid is group-like at every time.
    """
    from .path_metrics import RoughPathGrid

    lvl1, lvl2 = signature_arrays(points, level)
    n = lvl1.shape[0]
    if times is None:
        times = np.linspace(0.0, 1.0, n)
    return RoughPathGrid(np.asarray(times, dtype=float), lvl1, lvl2, p_hint=1.0)
