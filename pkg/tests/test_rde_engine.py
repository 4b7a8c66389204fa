import numpy as np
import pytest

from roughmf.drivers import PreferenceSpec, sample_driver
from roughmf.errors import DivergenceError, MismatchError
from roughmf.path_metrics import RoughPathGrid
from roughmf.rde_engine import (
    DriftKernel,
    SolutionPath,
    VectorFieldSet,
    driver_increments,
    estimate_error,
    linear_kernel,
    refine_midpoints,
    smoothed_attraction_kernel,
    solve_rde,
    solve_rde_batch,
    zero_kernel,
)
from roughmf.tensor_core import signature_pl


def scalar_linear_fields(a):
    return VectorFieldSet(
        d=1,
        e=1,
        eval=lambda y: a * y[:, None],
        jac=lambda y: np.array([[[a]]]),
        eval_batch=lambda Y: a * Y[:, :, None],
        jac_batch=lambda Y: np.broadcast_to(np.array([[[a]]]), (Y.shape[0], 1, 1, 1)),
    )


def zero_fields(e, d):
    return VectorFieldSet(
        d=d,
        e=e,
        eval=lambda y: np.zeros((e, d)),
        jac=lambda y: np.zeros((d, e, e)),
    )


def smooth_driver(G, freq=1.0):
    t = np.linspace(0.0, 1.0, G + 1)
    pts = np.stack([np.sin(freq * np.pi * t), t * np.cos(freq * t)], axis=1)
    pts -= pts[0]
    return signature_pl(pts, 2, times=t)


class TestVectorFieldSet:
    def test_accepts_consistent_jacobian(self):
        scalar_linear_fields(0.7)

    def test_rejects_wrong_jacobian(self):
        with pytest.raises(MismatchError):
            VectorFieldSet(
                d=1, e=1, eval=lambda y: np.tanh(y)[:, None], jac=lambda y: np.array([[[5.0]]])
            )

    def test_rejects_bad_shape(self):
        with pytest.raises(MismatchError):
            VectorFieldSet(d=2, e=1, eval=lambda y: np.zeros((1, 2)), jac=lambda y: np.zeros((1, 1, 1)))


class TestSolveRde:
    def test_pure_ode_constant_drift(self):
        vf = zero_fields(2, 2)  # fields are zero: a pure ODE along any driver
        driver = smooth_driver(16)
        c = np.array([0.3, -1.2])
        sol = solve_rde(vf, lambda t, y: c, driver, np.zeros(2))
        np.testing.assert_allclose(sol.states[-1], c * 1.0, atol=1e-14)
        mid = driver.times[7]
        np.testing.assert_allclose(sol.states[7], c * mid, atol=1e-14)

    def test_scalar_linear_closed_form(self):
        # the per-seed error ratio is stochastic; the mean over seeds is the
        # stable first-order statistic
        a = 0.4
        vf = scalar_linear_fields(a)
        e_coarse, e_fine = [], []
        for i in range(5):
            spec = PreferenceSpec("bm", d=1, T=1.0, grid_size=512, seed=5000 + i)
            fine = sample_driver(spec, 0)
            coarse = fine.restrict(np.arange(0, 513, 2))
            errs = {}
            for x in (coarse, fine):
                sol = solve_rde(vf, None, x, np.array([1.0]))
                exact = np.exp(a * x.lvl1[:, 0])
                errs[x.n_times] = np.max(np.abs(sol.states[:, 0] - exact))
            assert errs[257] < 5e-3
            e_coarse.append(errs[257])
            e_fine.append(errs[513])
        assert np.mean(e_coarse) / np.mean(e_fine) > 1.7

    def test_commuting_fields_ignore_area(self):
        # constant fields commute: only level 1 of the driver may matter
        V = np.array([[1.0, 0.3], [-0.2, 0.8]])
        vf = VectorFieldSet(d=2, e=2, eval=lambda y: V, jac=lambda y: np.zeros((2, 2, 2)))
        base = sample_driver(PreferenceSpec("bm", d=2, T=1.0, grid_size=32, seed=3), 0)
        twist = np.linspace(0, 2, base.n_times)
        area = np.zeros((base.n_times, 2, 2))
        area[:, 0, 1] = twist
        area[:, 1, 0] = -twist
        alt = RoughPathGrid(base.times, base.lvl1, base.lvl2 + area, p_hint=base.p_hint)
        y0 = np.array([0.5, -0.5])
        s1 = solve_rde(vf, None, base, y0)
        s2 = solve_rde(vf, None, alt, y0)
        assert np.max(np.abs(s1.states - s2.states)) < 1e-12

    def test_divergence_reports_step(self):
        vf = VectorFieldSet(
            d=1,
            e=1,
            eval=lambda y: (y * y + 1.0)[:, None] * 1e6,
            jac=lambda y: (2e6 * y).reshape(1, 1, 1),
        )
        t = np.linspace(0.0, 1.0, 9)
        driver = signature_pl(t[:, None], 2, times=t)
        with pytest.raises(DivergenceError) as err:
            solve_rde(vf, None, driver, np.array([1.0]))
        assert err.value.step >= 0

    def test_zero_everything_constant(self):
        vf = zero_fields(2, 2)
        driver = smooth_driver(8)
        sol = solve_rde(vf, None, driver, np.array([1.0, 2.0]))
        assert np.all(sol.states == np.array([1.0, 2.0]))

    def test_validation(self):
        vf = scalar_linear_fields(0.5)
        lvl1_only = RoughPathGrid(np.array([0.0, 1.0]), np.zeros((2, 1)))
        with pytest.raises(MismatchError):
            solve_rde(vf, None, lvl1_only, np.array([1.0]))
        with pytest.raises(MismatchError):
            solve_rde(vf, None, smooth_driver(4), np.array([1.0]))  # dim 2 vs d=1


class TestSolutionLift:
    def test_level1_increments_match_states(self):
        a = 0.4
        vf = scalar_linear_fields(a)
        x = sample_driver(PreferenceSpec("bm", d=1, T=1.0, grid_size=32, seed=9), 0)
        sol = solve_rde(vf, lambda t, y: np.array([0.1]), x, np.array([1.0]), want_lift=True)
        np.testing.assert_array_equal(sol.lift.lvl1, sol.states - sol.states[0])

    def test_lift_chen_consistent(self):
        vf = scalar_linear_fields(0.6)
        x = smooth_driver(16).restrict(np.arange(0, 17, 2))
        x = sample_driver(PreferenceSpec("bm", d=1, T=1.0, grid_size=16, seed=10), 2)
        sol = solve_rde(vf, None, x, np.array([0.7]), want_lift=True)
        lift = sol.lift
        for (i, k, j) in [(0, 3, 7), (2, 5, 16), (0, 8, 16)]:
            a, b, c = lift.increment(i, k), lift.increment(k, j), lift.increment(i, j)
            chained = a.lvl2 + b.lvl2 + np.outer(a.lvl1, b.lvl1)
            np.testing.assert_allclose(chained, c.lvl2, rtol=1e-12, atol=1e-14)


class TestRefineAndErrors:
    def test_refine_equals_finer_pl_lift(self):
        rng = np.random.default_rng(4)
        pts = np.vstack([np.zeros((1, 2)), np.cumsum(rng.standard_normal((8, 2)), axis=0)])
        lift = signature_pl(pts, 2)
        fine_pts = np.empty((17, 2))
        fine_pts[::2] = pts
        fine_pts[1::2] = 0.5 * (pts[:-1] + pts[1:])
        want = signature_pl(fine_pts, 2)
        got = refine_midpoints(lift)
        np.testing.assert_allclose(got.lvl1, want.lvl1, atol=1e-13)
        np.testing.assert_allclose(got.lvl2, want.lvl2, atol=1e-13)

    def test_refine_chen_consistent_with_areas(self):
        x = sample_driver(PreferenceSpec("bm", d=2, T=1.0, grid_size=8, seed=5), 0)
        # graft an artificial area so the increments genuinely carry one
        area = np.zeros((9, 2, 2))
        area[:, 0, 1] = np.linspace(0, 1, 9)
        area[:, 1, 0] = -area[:, 0, 1]
        x = RoughPathGrid(x.times, x.lvl1, x.lvl2 + area, p_hint=x.p_hint)
        fine = refine_midpoints(x)
        assert fine.max_group_defect() < 1e-12
        np.testing.assert_array_equal(fine.lvl1[::2], x.lvl1)
        np.testing.assert_array_equal(fine.lvl2[::2], x.lvl2)
        inc_c1, inc_c2 = driver_increments(x)
        # Chen across each inserted midpoint reproduces the original increment
        for k in range(8):
            a = fine.increment(2 * k, 2 * k + 1)
            b = fine.increment(2 * k + 1, 2 * k + 2)
            np.testing.assert_allclose(a.lvl1 + b.lvl1, inc_c1[k], atol=1e-13)
            np.testing.assert_allclose(
                a.lvl2 + b.lvl2 + np.outer(a.lvl1, b.lvl1), inc_c2[k], atol=1e-13
            )

    def test_ode_error_first_order(self):
        vf = zero_fields(1, 2)
        drift = lambda t, y: np.array([np.sin(3 * t) + y[0] * 0.2])
        e1 = estimate_error(vf, drift, smooth_driver(32), np.array([0.4]))
        e2 = estimate_error(vf, drift, smooth_driver(64), np.array([0.4]))
        assert e2.err_estimate < e1.err_estimate / 1.7

    def test_rde_error_shrinks_with_refinement(self):
        # per-seed estimates fluctuate; the mean over seeds must shrink
        vf = scalar_linear_fields(0.5)
        coarse_errs, fine_errs = [], []
        for i in range(10):
            spec_f = PreferenceSpec("bm", d=1, T=1.0, grid_size=128, seed=7000 + i)
            fine = sample_driver(spec_f, 0)
            coarse = fine.restrict(np.arange(0, 129, 2))
            coarse_errs.append(estimate_error(vf, None, coarse, np.array([1.0])).err_estimate)
            fine_errs.append(estimate_error(vf, None, fine, np.array([1.0])).err_estimate)
        assert np.mean(fine_errs) < np.mean(coarse_errs)

    def test_zero_dynamics_zero_error(self):
        vf = zero_fields(2, 2)
        est = estimate_error(vf, None, smooth_driver(8), np.array([1.0, -1.0]))
        assert est.err_estimate == 0.0

    def test_time_reversal_sanity(self):
        a = 0.8
        vf = scalar_linear_fields(a)
        G = 64
        t = np.linspace(0.0, 1.0, G + 1)
        pts = np.sin(1.5 * t)[:, None]
        fwd = signature_pl(pts - pts[0], 2, times=t)
        bwd = signature_pl(pts[::-1] - pts[-1], 2, times=t)
        y0 = np.array([1.0])
        sol_f = solve_rde(vf, None, fwd, y0)
        est_f = estimate_error(vf, None, fwd, y0)
        sol_b = solve_rde(vf, None, bwd, sol_f.states[-1])
        est_b = estimate_error(vf, None, bwd, sol_f.states[-1])
        gap = abs(sol_b.states[-1, 0] - y0[0])
        assert gap <= 10 * (est_f.err_estimate + est_b.err_estimate) + 1e-12


class TestBatchStepper:
    def test_solo_matches_batch_bitwise(self):
        from roughmf.chaos_lab import tanh_fields

        vf = tanh_fields()
        spec = PreferenceSpec("bm", d=2, T=1.0, grid_size=16, seed=13)
        drivers = [sample_driver(spec, i) for i in range(12)]
        inc1 = np.stack([driver_increments(q)[0] for q in drivers])
        inc2 = np.stack([driver_increments(q)[1] for q in drivers])
        y0s = np.random.default_rng(1).standard_normal((12, 2))
        drift = lambda k, t, Y: 0.1 * Y
        states, l1, l2 = solve_rde_batch(
            vf, drift, drivers[0].times, inc1, inc2, y0s, want_lift=True
        )
        for m in range(12):
            sm, s1, s2 = solve_rde_batch(
                vf,
                drift,
                drivers[0].times,
                inc1[m : m + 1],
                inc2[m : m + 1],
                y0s[m : m + 1],
                want_lift=True,
            )
            assert np.array_equal(sm[0], states[m])
            assert np.array_equal(s2[0], l2[m])


class TestKernels:
    def test_probe_reports_bounds(self):
        k = linear_kernel(0.5)
        rep = k.probe(e=2)
        assert rep["sup"] > 0 and rep["lip_first_arg"] == pytest.approx(0.5, rel=0.05)

    def test_zero_kernel(self):
        k = zero_kernel()
        assert np.all(k.sigma(np.ones((3, 2)), np.zeros((3, 2))) == 0)

    def test_smoothed_attraction_bounded(self):
        k = smoothed_attraction_kernel(1.0, 0.5)
        rep = k.probe(e=2, scale=5.0)
        assert np.isfinite(rep["sup"]) and np.isfinite(rep["lip_first_arg"])
