"""Sampling of preference paths and their level-2 lifts.

Per-individual randomness comes from a counter-based mix of the master
seed and the individual index, so ensembles are order-independent and
reproducible regardless of how sampling is scheduled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np

from .errors import MismatchError
from .path_metrics import RoughPathGrid
from .tensor_core import signature_arrays

Family = Literal["bm", "fbm", "piecewise_linear_corpus"]

# distinct Philox streams per purpose, mixed with (seed, index)
_STREAM_DRIVER = 0x9E3779B97F4A7C15
_STREAM_STATE = 0xC2B2AE3D27D4EB4F


def individual_rng(seed: int, index: int, stream: int = _STREAM_DRIVER) -> np.random.Generator:
    """Deterministic per-individual generator, independent of sampling order."""
    key = np.array([np.uint64(seed & (2**64 - 1)), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=[0, 0, 0, stream]))


@dataclass(frozen=True)
class PreferenceSpec:
    """Description of the preference (driver) law for one scenario.

    ``volatility_rule`` is either a constant, the string
    ``"sup_normalized"`` (scale each path by the reciprocal of its level-1
    sup, damping enthusiastic outliers), or a per-individual callable
    index -> float.  ``H`` must stay above 1/3 so the level-2 setting
    applies; ``grid_size`` must be a power of two.
    """

    family: Family
    d: int
    T: float
    grid_size: int
    H: float = 0.5
    volatility_rule: float | str | Callable[[int], float] = 1.0
    seed: int = 0
    corpus_path: str | None = None

    def __post_init__(self):
        if self.family not in ("bm", "fbm", "piecewise_linear_corpus"):
            raise MismatchError(f"unknown driver family {self.family!r}")
        if self.family == "fbm" and not (1.0 / 3.0 < self.H <= 1.0):
            raise MismatchError(f"Hurst parameter must lie in (1/3, 1], got {self.H}")
        g = self.grid_size
        if g < 2 or g & (g - 1):
            raise MismatchError(f"grid_size must be a power of two, got {g}")
        if self.family == "piecewise_linear_corpus" and self.corpus_path is None:
            raise MismatchError("corpus family needs corpus_path")

    @property
    def p_hint(self) -> float:
        # midpoint of the admissible window (1/H, 3); Brownian gives 2.5
        h = 0.5 if self.family != "fbm" else self.H
        return (1.0 / h + 3.0) / 2.0


@dataclass(frozen=True)
class JointLiftPolicy:
    """How the free antisymmetric cross-areas of a joint lift are filled.

    ``zero_cross_area`` sets them to zero; ``joint_piecewise_linear``
    takes them from the joint signature of the stacked level-1 paths.
    Both modes are weakly geometric by construction and differ only in
    those antisymmetric cross blocks.
    """

    mode: Literal["zero_cross_area", "joint_piecewise_linear"]

    def __post_init__(self):
        if self.mode not in ("zero_cross_area", "joint_piecewise_linear"):
            raise MismatchError(f"unknown joint lift mode {self.mode!r}")


ZERO_CROSS_AREA = JointLiftPolicy("zero_cross_area")
JOINT_PIECEWISE_LINEAR = JointLiftPolicy("joint_piecewise_linear")

_fbm_factor_cache: dict[tuple[float, float, int], np.ndarray] = {}


def fbm_covariance(times_pos: np.ndarray, H: float) -> np.ndarray:
    """Exact fBm grid covariance 0.5 (s^2H + t^2H - |t - s|^2H)."""
    s = times_pos[:, None]
    t = times_pos[None, :]
    return 0.5 * (s ** (2 * H) + t ** (2 * H) - np.abs(t - s) ** (2 * H))


def _fbm_factor(H: float, T: float, G: int) -> np.ndarray:
    """Lower-triangular-style factor L with L L^T = covariance.

    Cholesky where the covariance is numerically positive definite, with
    an eigenvalue factorization fallback for the semidefinite edge
    (H close to 1).  O(G^2) memory; correctness over speed at desk scale.
    """
    key = (H, T, G)
    cached = _fbm_factor_cache.get(key)
    if cached is not None:
        return cached
    if G > 4096:
        raise MismatchError(f"fBm factorization capped at 4096 grid points, got {G}")
    times_pos = np.linspace(0.0, T, G + 1)[1:]
    cov = fbm_covariance(times_pos, H)
    try:
        fac = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        fac = v * np.sqrt(np.clip(w, 0.0, None))
    fac.setflags(write=False)
    _fbm_factor_cache[key] = fac
    return fac


def load_corpus(path: str) -> np.ndarray:
    """Read a sampled path from CSV with header ``time,x1,...,xd``.

    One row per time; returns the (n, d) array of components (the time
    column is checked for monotonicity and dropped).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[0] != "time":
            raise MismatchError("corpus CSV must start with a 'time' column")
        rows = [[float(v) for v in row] for row in reader]
    data = np.asarray(rows, dtype=float)
    if data.ndim != 2 or data.shape[0] < 2 or data.shape[1] < 2:
        raise MismatchError("corpus CSV needs >= 2 rows and a state column")
    if np.any(np.diff(data[:, 0]) <= 0):
        raise MismatchError("corpus times must be strictly increasing")
    return data[:, 1:]


_corpus_cache: dict[str, np.ndarray] = {}


def _volatility(spec: PreferenceSpec, index: int, points: np.ndarray) -> float:
    rule = spec.volatility_rule
    if rule == "sup_normalized":
        sup = float(np.max(np.linalg.norm(points - points[0], axis=1)))
        return 0.0 if sup == 0.0 else 1.0 / sup
    if callable(rule):
        return float(rule(index))
    return float(rule)


def sample_driver(spec: PreferenceSpec, individual_index: int) -> RoughPathGrid:
    """Draw one individual's driver and lift it piecewise-linearly to level 2.

    Deterministic function of (spec.seed, individual_index).  The
    volatility rule acts as a group dilation of the whole lifted path
    (level 1 scales by sigma, level 2 and the area by sigma^2).
    """
    G, d = spec.grid_size, spec.d
    times = np.linspace(0.0, spec.T, G + 1)
    if spec.family == "piecewise_linear_corpus":
        pts = _corpus_cache.get(spec.corpus_path)
        if pts is None:
            pts = load_corpus(spec.corpus_path)
            _corpus_cache[spec.corpus_path] = pts
        if pts.shape != (G + 1, d):
            raise MismatchError(f"corpus shape {pts.shape} != ({G + 1}, {d})")
        points = pts
    else:
        rng = individual_rng(spec.seed, individual_index)
        if spec.family == "bm":
            dt = spec.T / G
            inc = rng.standard_normal((G, d)) * np.sqrt(dt)
            points = np.vstack([np.zeros((1, d)), np.cumsum(inc, axis=0)])
        else:
            fac = _fbm_factor(spec.H, spec.T, G)
            z = rng.standard_normal((G, d))
            points = np.vstack([np.zeros((1, d)), fac @ z])
    lvl1, lvl2 = signature_arrays(points, level=2)
    grid = RoughPathGrid(times, lvl1, lvl2, p_hint=spec.p_hint)
    sigma = _volatility(spec, individual_index, points)
    if sigma != 1.0:
        grid = grid.dilate(sigma)
    return grid


def joint_lift(paths: list[RoughPathGrid], policy: JointLiftPolicy) -> RoughPathGrid:
    """Consistent lift of N level-2 paths to one path over R^(N d).

    Diagonal level-2 blocks are the inputs' blocks verbatim; symmetric
    cross parts are forced by geometricity; antisymmetric cross parts
    follow the policy.
    """
    if not paths:
        raise MismatchError("joint_lift needs at least one path")
    if len(paths) == 1:
        return paths[0]
    first = paths[0]
    for q in paths[1:]:
        if not np.array_equal(q.times, first.times):
            raise MismatchError("joint lift requires a shared time grid")
        if q.dim != first.dim or q.level != 2:
            raise MismatchError("joint lift requires equal dims and level 2")
    if first.level != 2:
        raise MismatchError("joint lift requires level-2 inputs")
    N, d, n = len(paths), first.dim, first.n_times
    u = np.concatenate([q.lvl1 for q in paths], axis=1)  # (n, N d)
    lvl2 = 0.5 * u[:, :, None] * u[:, None, :]
    if policy.mode == "joint_piecewise_linear":
        _, joint2 = signature_arrays(u, level=2)
        anti = 0.5 * (joint2 - np.swapaxes(joint2, 1, 2))
        # keep only cross-blocks of the antisymmetric part
        for i in range(N):
            b = slice(i * d, (i + 1) * d)
            anti[:, b, b] = 0.0
        lvl2 = lvl2 + anti
    for i, q in enumerate(paths):
        b = slice(i * d, (i + 1) * d)
        lvl2[:, b, b] = q.lvl2
    p_hint = max(q.p_hint for q in paths)
    return RoughPathGrid(first.times, u, lvl2, p_hint=p_hint)


@dataclass(frozen=True)
class DiscretePreferenceMeasure:
    """A finitely supported preference measure: weights on support paths."""

    weights: np.ndarray
    paths: list[RoughPathGrid]

    def expect(self, functional):
        """Weighted average of a path functional over the support."""
        return sum(w * functional(q) for w, q in zip(self.weights, self.paths))


def discrete_measure(weights, paths) -> DiscretePreferenceMeasure:
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 1 or weights.shape[0] != len(paths):
        raise MismatchError("need one weight per path")
    if np.any(weights < 0):
        raise MismatchError("weights must be nonnegative")
    if abs(float(weights.sum()) - 1.0) > 1e-12:
        raise MismatchError(f"weights must sum to 1, got {weights.sum()!r}")
    first = paths[0]
    for q in paths[1:]:
        if not np.array_equal(q.times, first.times) or q.dim != first.dim:
            raise MismatchError("support paths must share grid and dim")
    weights = weights.copy()
    weights.setflags(write=False)
    return DiscretePreferenceMeasure(weights, list(paths))
