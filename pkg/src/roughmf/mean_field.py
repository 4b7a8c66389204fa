"""The measure layer: empirical path measures, occupation drift, Picard iteration.

Measures are always finitely supported ensembles of solved trajectories;
the dual-space embedding of measure paths is realized only through the
finite sums it induces.  All reductions over particles run in fixed index
order, so results do not depend on scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .drivers import (
    _STREAM_STATE,
    DiscretePreferenceMeasure,
    JointLiftPolicy,
    PreferenceSpec,
    individual_rng,
    joint_lift,
    sample_driver,
)
from .errors import MismatchError
from .path_metrics import RoughPathGrid, control_table, m_alpha, rho_pvar_pairs
from .rde_engine import DriftKernel, SolutionPath, VectorFieldSet, solve_rde_batch

MAX_ASSIGNMENT_ATOMS = 512
MAX_SUPPORT_PATHS = 64
MAX_JOINT_STATE_DIM = 4096


class Ensemble:
    """Paired initial states and drivers for M individuals, with weights."""

    def __init__(self, y0s, drivers, weights=None):
        self.y0s = np.asarray(y0s, dtype=float)
        self.drivers = list(drivers)
        M = len(self.drivers)
        if self.y0s.shape[0] != M:
            raise MismatchError("need one initial state per driver")
        if weights is None:
            weights = np.full(M, 1.0 / M)
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (M,) or np.any(self.weights < 0):
            raise MismatchError("weights must be M nonnegative reals")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise MismatchError("weights must sum to 1")
        first = self.drivers[0]
        for q in self.drivers[1:]:
            if not np.array_equal(q.times, first.times) or q.dim != first.dim:
                raise MismatchError("drivers must share grid and dim")
            if q.level != 2:
                raise MismatchError("drivers must be level 2")
        self.times = first.times
        self._inc = None

    def __len__(self):
        return len(self.drivers)

    @property
    def p_hint(self):
        return max(q.p_hint for q in self.drivers)

    def increments(self):
        """Stacked per-interval driver increments, cached."""
        if self._inc is None:
            x1 = np.stack([q.lvl1 for q in self.drivers])
            x2 = np.stack([q.lvl2 for q in self.drivers])
            inc1 = np.diff(x1, axis=1)
            inc2 = np.diff(x2, axis=1) - x1[:, :-1, :, None] * inc1[:, :, None, :]
            self._inc = (inc1, inc2)
        return self._inc


def sample_ensemble(spec: PreferenceSpec, indices, y0_mean, y0_std, weights=None) -> Ensemble:
    """Sample (y0_i, driver_i) pairs; every column is a pure function of
    (spec.seed, index), so ensembles are order-independent and replayable."""
    y0_mean = np.asarray(y0_mean, dtype=float)
    e = y0_mean.shape[0]
    indices = list(indices)
    y0s = np.empty((len(indices), e))
    for row, i in enumerate(indices):
        rng = individual_rng(spec.seed, i, _STREAM_STATE)
        y0s[row] = y0_mean + y0_std * rng.standard_normal(e)
    drivers = [sample_driver(spec, i) for i in indices]
    return Ensemble(y0s, drivers, weights)


class EmpiricalPathMeasure:
    """A weighted finite family of solution trajectories on a common grid."""

    def __init__(self, weights, trajectories):
        self.weights = np.asarray(weights, dtype=float)
        self.trajectories = list(trajectories)
        M = len(self.trajectories)
        if self.weights.shape != (M,) or np.any(self.weights < 0):
            raise MismatchError("weights must be M nonnegative reals")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise MismatchError("weights must sum to 1")
        first = self.trajectories[0]
        for q in self.trajectories[1:]:
            if not np.array_equal(q.times, first.times):
                raise MismatchError("trajectories must share the time grid")
        self.times = first.times
        self._states = None
        self._lifts = None

    def __len__(self):
        return len(self.trajectories)

    @property
    def states(self):
        """(M, n, e) stack of trajectory states, cached."""
        if self._states is None:
            self._states = np.stack([q.states for q in self.trajectories])
        return self._states

    @property
    def lifts(self):
        """(lift1, lift2) stacks when every trajectory carries a lift, else None."""
        if self._lifts is None and all(q.lift is not None for q in self.trajectories):
            l1 = np.stack([q.lift.lvl1 for q in self.trajectories])
            l2 = np.stack([q.lift.lvl2 for q in self.trajectories])
            self._lifts = (l1, l2)
        return self._lifts

    def mean_trajectory(self):
        return np.einsum("m,mne->ne", self.weights, self.states)


def _measure_from_arrays(weights, times, states, l1, l2, p_hint):
    trajs = []
    for m in range(states.shape[0]):
        lift = None
        if l1 is not None:
            lift = RoughPathGrid(times, l1[m], l2[m], p_hint=p_hint)
        trajs.append(SolutionPath(times, states[m], lift))
    return EmpiricalPathMeasure(weights, trajs)


@dataclass
class OccupationDrift:
    """The mean-field drift b(t, y) = sum_j w_j sigma(y, Y_j(t)).

    Realizes the occupation-measure pairing as an exact finite sum over
    the measure's support trajectories.
    """

    measure: EmpiricalPathMeasure
    kernel: DriftKernel

    def eval(self, t, y):
        k = int(np.searchsorted(self.measure.times, t))
        if k >= len(self.measure.times) or self.measure.times[k] != t:
            raise MismatchError(f"t={t} is not a grid time of the measure")
        return self.eval_at_index(k, np.asarray(y, dtype=float)[None, :])[0]

    def eval_at_index(self, k, Y, chunk_elems=4_000_000):
        """Drift at grid index k for a batch of states Y (M, e)."""
        support = self.measure.states[:, k, :]
        w = self.measure.weights
        if self.kernel.weighted_mean is not None:
            return self.kernel.weighted_mean(w, support, Y)
        Ms, e = support.shape
        M = Y.shape[0]
        out = np.empty((M, e))
        rows = max(1, int(chunk_elems // max(1, Ms * e)))
        for lo in range(0, M, rows):
            hi = min(lo + rows, M)
            vals = self.kernel.sigma(Y[lo:hi, None, :], support[None, :, :])
            out[lo:hi] = np.einsum("j,mje->me", w, vals)
        return out


def _solve_ensemble(ensemble: Ensemble, vf: VectorFieldSet, drift_batch, want_lift=True):
    inc1, inc2 = ensemble.increments()
    states, l1, l2 = solve_rde_batch(
        vf, drift_batch, ensemble.times, inc1, inc2, ensemble.y0s, want_lift
    )
    return _measure_from_arrays(
        ensemble.weights, ensemble.times, states, l1, l2, ensemble.p_hint
    )


def interaction_free_solution(ensemble: Ensemble, vf: VectorFieldSet) -> EmpiricalPathMeasure:
    """Decoupled solves with the interaction kernel zeroed (the Picard start)."""
    return _solve_ensemble(ensemble, vf, lambda k, t, Y: np.zeros_like(Y))


def apply_psi(
    mu: EmpiricalPathMeasure, ensemble: Ensemble, vf: VectorFieldSet, kernel: DriftKernel
) -> EmpiricalPathMeasure:
    """One application of the push-forward map: solve every individual's RDE
    with the occupation drift induced by ``mu`` and this kernel."""
    if not np.array_equal(mu.times, ensemble.times):
        raise MismatchError("measure and ensemble must share the time grid")
    drift = OccupationDrift(mu, kernel)
    return _solve_ensemble(ensemble, vf, lambda k, t, Y: drift.eval_at_index(k, Y))


def coupled_distance(A: EmpiricalPathMeasure, B: EmpiricalPathMeasure, p: float) -> float:
    """Same-index weighted sum of pathwise distances (a Wasserstein upper bound)."""
    if len(A) != len(B):
        raise MismatchError("same-index coupling needs equal support sizes")
    if not np.allclose(A.weights, B.weights, rtol=0, atol=1e-12):
        raise MismatchError("same-index coupling needs matching weights")
    rhos = _pairwise_rhos(A, B, np.arange(len(A)), np.arange(len(B)), p)
    return float(np.dot(A.weights, rhos))


def _rho_stack(A: EmpiricalPathMeasure, level2: bool):
    lifts = A.lifts if level2 else None
    if lifts is not None:
        return (lifts[0], lifts[1], A.states[:, 0])
    z = A.states - A.states[:, :1, :]
    return (z, None, A.states[:, 0])


def _pairwise_rhos(A, B, idx_a, idx_b, p):
    level2 = A.lifts is not None and B.lifts is not None
    return rho_pvar_pairs(_rho_stack(A, level2), _rho_stack(B, level2), idx_a, idx_b, p)


@dataclass
class FixedPointReport:
    """Evidence trail of one Picard run."""

    iterations: int
    distances: list
    ratios: list
    final: EmpiricalPathMeasure
    converged: bool
    tol: float


def fixed_point(
    ensemble: Ensemble,
    vf: VectorFieldSet,
    kernel: DriftKernel,
    tol: float = 1e-6,
    max_iter: int = 50,
    p: float | None = None,
    initial: EmpiricalPathMeasure | None = None,
) -> FixedPointReport:
    """Picard iteration of the push-forward map until the same-index coupled
    distance between successive iterates drops below ``tol``.

    The coupling shares (y0, driver) across iterates, so the stopping
    metric is a valid Wasserstein upper bound.  A non-converged run
    returns a report with ``converged=False`` rather than raising.
    """
    if tol <= 0:
        raise MismatchError(f"tol must be positive, got {tol}")
    if p is None:
        p = ensemble.p_hint
    current = initial if initial is not None else interaction_free_solution(ensemble, vf)
    comparable = len(current) == len(ensemble) and np.allclose(
        current.weights, ensemble.weights, rtol=0, atol=1e-12
    )
    distances: list[float] = []
    iterations = 0
    converged = False
    for _ in range(max_iter):
        nxt = apply_psi(current, ensemble, vf, kernel)
        iterations += 1
        if comparable:
            d = coupled_distance(nxt, current, p)
            distances.append(d)
            if d <= tol:
                current = nxt
                converged = True
                break
        comparable = True
        current = nxt
    ratios = [
        distances[i + 1] / distances[i]
        for i in range(len(distances) - 1)
        if distances[i] > 0
    ]
    return FixedPointReport(iterations, distances, ratios, current, converged, tol)


def wasserstein(
    A: EmpiricalPathMeasure, B: EmpiricalPathMeasure, mode: str, p: float
) -> float:
    """Wasserstein distance between two empirical path measures.

    ``same_index`` sums pathwise distances along the index coupling (an
    upper bound, used for iteration control); ``assignment`` solves the
    exact optimal matching over the full pathwise cost matrix and needs
    uniform equal weights on both sides.
    """
    if not np.array_equal(A.times, B.times):
        raise MismatchError("measures must share the time grid")
    if mode == "same_index":
        return coupled_distance(A, B, p)
    if mode != "assignment":
        raise MismatchError(f"unknown wasserstein mode {mode!r}")
    Ma, Mb = len(A), len(B)
    if Ma != Mb:
        raise MismatchError("assignment mode needs equal atom counts")
    if Ma > MAX_ASSIGNMENT_ATOMS:
        raise MismatchError(f"assignment mode capped at {MAX_ASSIGNMENT_ATOMS} atoms")
    uniform = np.full(Ma, 1.0 / Ma)
    for M in (A, B):
        if not np.allclose(M.weights, uniform, rtol=0, atol=1e-12):
            raise MismatchError("assignment mode needs uniform equal weights")
    ia, ib = np.meshgrid(np.arange(Ma), np.arange(Mb), indexing="ij")
    cost = _pairwise_rhos(A, B, ia.ravel(), ib.ravel(), p).reshape(Ma, Mb)
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum() / Ma)


def solve_finite_support(
    nu: DiscretePreferenceMeasure,
    u0_samples,
    vf: VectorFieldSet,
    kernel: DriftKernel,
    policy: JointLiftPolicy,
) -> EmpiricalPathMeasure:
    """Exact finite-support route: one big RDE over the joint lift.

    Builds the joint driver over R^(N d) under the chosen cross-area
    policy, assembles block-diagonal diffusion fields and the coupled
    interaction drift, solves once in R^(N e) and projects back to the N
    trajectories.  The projections do not depend on the policy.
    """
    N = len(nu.paths)
    if N > MAX_SUPPORT_PATHS:
        raise MismatchError(f"finite-support solver capped at {MAX_SUPPORT_PATHS} paths")
    u0 = np.asarray(u0_samples, dtype=float)
    if u0.shape != (N, vf.e):
        raise MismatchError(f"u0_samples must be ({N}, {vf.e})")
    if N * vf.e > MAX_JOINT_STATE_DIM:
        raise MismatchError(f"joint state dimension {N * vf.e} exceeds {MAX_JOINT_STATE_DIM}")
    joint = joint_lift(nu.paths, policy) if N > 1 else nu.paths[0]
    wjoint = block_vector_fields(vf, N)
    lam = nu.weights
    e = vf.e

    def drift_batch(k, t, Y):
        blocks = Y.reshape(-1, N, e)
        pair = kernel.sigma(blocks[:, :, None, :], blocks[:, None, :, :])
        return np.einsum("i,bmie->bme", lam, pair).reshape(-1, N * e)

    inc1 = np.diff(joint.lvl1, axis=0)[None]
    inc2 = (np.diff(joint.lvl2, axis=0) - joint.lvl1[:-1, :, None] * np.diff(joint.lvl1, axis=0)[:, None, :])[None]
    states, l1, l2 = solve_rde_batch(
        wjoint, drift_batch, joint.times, inc1, inc2, u0.reshape(1, -1), want_lift=True
    )
    trajs = []
    for m in range(N):
        sl = slice(m * e, (m + 1) * e)
        lift = RoughPathGrid(joint.times, l1[0][:, sl], l2[0][:, sl, sl], p_hint=joint.p_hint)
        trajs.append(SolutionPath(joint.times, states[0][:, sl], lift))
    return EmpiricalPathMeasure(nu.weights, trajs)


def block_vector_fields(vf: VectorFieldSet, N: int) -> VectorFieldSet:
    """Block-diagonal diffusion fields of the N-particle system.

    Field j acts on particle m = j // d through the base field j mod d;
    each block depends only on its own particle's coordinates, which is
    what kills every cross-particle bracket.
    """
    d, e = vf.d, vf.e

    def eval_joint(Y):
        out = np.zeros((N * e, N * d))
        for m in range(N):
            out[m * e : (m + 1) * e, m * d : (m + 1) * d] = vf.eval(Y[m * e : (m + 1) * e])
        return out

    def jac_joint(Y):
        out = np.zeros((N * d, N * e, N * e))
        for m in range(N):
            Jm = vf.jac(Y[m * e : (m + 1) * e])
            sl = slice(m * e, (m + 1) * e)
            out[m * d : (m + 1) * d, sl, sl] = Jm
        return out

    return VectorFieldSet(d=N * d, e=N * e, eval=eval_joint, jac=jac_joint, check=False)


@dataclass
class MgfRow:
    theta: float
    estimate: float
    std_error: float
    max_share: float
    heavy_tail: bool


def mgf_diagnostic(
    spec: PreferenceSpec, thetas, alpha: float, samples: int, p: float | None = None
) -> list[MgfRow]:
    """Monte-Carlo estimate of E[exp(theta M_alpha)] over sampled drivers.

    Flags a theta whenever the estimate is dominated by the sample
    maximum (heavy-tail warning); never certifies finiteness.
    """
    if samples < 100:
        raise MismatchError(f"need at least 100 samples, got {samples}")
    if p is None:
        p = spec.p_hint
    ms = np.empty(samples)
    for i in range(samples):
        path = sample_driver(spec, i)
        ms[i] = m_alpha(path, p, alpha, table=control_table(path, p))
    rows = []
    for theta in thetas:
        vals = np.exp(theta * ms)
        est = float(vals.mean())
        se = float(vals.std(ddof=1) / np.sqrt(samples))
        share = float(vals.max() / vals.sum())
        rows.append(MgfRow(float(theta), est, se, share, share > 0.5))
    return rows


def save_measure(measure: EmpiricalPathMeasure, path: str):
    """Checkpoint an ensemble to .npz (times, weights, states, lift arrays)."""
    arrays = {
        "times": measure.times,
        "weights": measure.weights,
        "states": measure.states,
    }
    lifts = measure.lifts
    if lifts is not None:
        arrays["lift1"], arrays["lift2"] = lifts
        arrays["p_hint"] = np.array(measure.trajectories[0].lift.p_hint)
    np.savez_compressed(path, **arrays)


def load_measure(path: str) -> EmpiricalPathMeasure:
    with np.load(path) as data:
        times = data["times"]
        weights = data["weights"]
        states = data["states"]
        if "lift1" in data:
            l1, l2 = data["lift1"], data["lift2"]
            p_hint = float(data["p_hint"])
        else:
            l1 = l2 = None
            p_hint = 1.0
    return _measure_from_arrays(weights, times, states, l1, l2, p_hint)
