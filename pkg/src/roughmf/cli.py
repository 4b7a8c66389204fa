"""Command-line front end: every experiment and check as a subcommand.

Configuration is a flat ``key = value`` text file plus command-line
overrides; each run copies the resolved configuration and the tool
version into the output directory, so results diff cleanly.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__, chaos_lab, mean_field
from .drivers import JOINT_PIECEWISE_LINEAR, ZERO_CROSS_AREA, PreferenceSpec, discrete_measure, sample_driver
from .errors import ConfigError, DivergenceError, GridTooCoarseError, MismatchError
from .path_metrics import control_table, m_alpha, pvar_bound_check, rho_p_omega
from .rde_engine import estimate_error, linear_kernel, smoothed_attraction_kernel, solve_rde, zero_kernel


@dataclass
class ExperimentConfig:
    scenario: str = "benchmark"
    family: str = "bm"
    hurst: float = 0.5
    d: int = 2
    e: int = 2
    horizon: float = 1.0
    grid: int = 256
    volatility: str = "1.0"
    corpus: str = ""
    kernel: str = "linear"
    kernel_a: float = 0.5
    kernel_eps: float = 0.5
    vf: str = "tanh"
    y0_mean: str = "0.4,-0.2"
    y0_std: float = 0.3
    ensemble: int = 256
    m_ref: int = 4096
    ns: str = "8,16,32,64,128,256,512"
    repeats: int = 20
    seed: int = 12345
    tol: float = 1e-6
    max_iter: int = 50
    eps_list: str = "0.2,0.1,0.05,0.025"
    pathwise_cap: int = 128
    finite_atoms: int = 8
    finite_tol: float = 1e-10
    mgf_thetas: str = "0.0,0.05,0.1,0.2"
    mgf_alpha: float = 1.0
    mgf_samples: int = 200
    check_lifts: int = 20
    check_alphas: str = "0.5,1.0,2.0"
    check_p: float = 2.5
    lift_index: int = 0
    ref_checkpoint: str = ""

    @classmethod
    def from_file(cls, path):
        values = {}
        for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values):
        known = {f.name: f.type for f in fields(cls)}
        cfg = cls()
        for key, value in values.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(cfg, key)
            try:
                if isinstance(current, bool):
                    parsed = value.lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    parsed = int(value)
                elif isinstance(current, float):
                    parsed = float(value)
                else:
                    parsed = value
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {value!r}") from exc
            setattr(cfg, key, parsed)
        cfg.validate()
        return cfg

    def validate(self):
        if self.family not in ("bm", "fbm", "piecewise_linear_corpus"):
            raise ConfigError(f"unknown driver family {self.family!r}")
        if self.family == "fbm" and not (1.0 / 3.0 < self.hurst <= 1.0):
            raise ConfigError("hurst must lie in (1/3, 1]")
        if self.grid < 2 or self.grid & (self.grid - 1):
            raise ConfigError("grid must be a power of two")
        if self.kernel not in ("linear", "smoothed_attraction", "zero"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.vf not in ("tanh", "identity"):
            raise ConfigError(f"unknown vf selection {self.vf!r}")
        if self.vf == "tanh" and (self.d != 2 or self.e != 2):
            raise ConfigError("the tanh field set is two-dimensional (d = e = 2)")
        if self.volatility != "sup_normalized":
            try:
                float(self.volatility)
            except ValueError:
                raise ConfigError(f"bad volatility {self.volatility!r}") from None
        if len(self._floats(self.y0_mean)) != self.e:
            raise ConfigError("y0_mean must have e components")
        if self.tol <= 0 or self.max_iter < 1 or self.repeats < 1:
            raise ConfigError("tol, max_iter and repeats must be positive")
        for attr in ("ns", "eps_list", "check_alphas", "mgf_thetas"):
            self._floats(getattr(self, attr))

    @staticmethod
    def _floats(text):
        try:
            return [float(v) for v in str(text).split(",") if v.strip() != ""]
        except ValueError:
            raise ConfigError(f"bad numeric list {text!r}") from None

    # resolved pieces -------------------------------------------------

    def spec(self) -> PreferenceSpec:
        vol = self.volatility if self.volatility == "sup_normalized" else float(self.volatility)
        return PreferenceSpec(
            family=self.family,
            d=self.d,
            T=self.horizon,
            grid_size=self.grid,
            H=self.hurst,
            volatility_rule=vol,
            seed=self.seed,
            corpus_path=self.corpus or None,
        )

    def fields_set(self):
        if self.vf == "tanh":
            return chaos_lab.tanh_fields()
        return chaos_lab.identity_fields(self.e)

    def kernel_set(self):
        if self.kernel == "linear":
            return linear_kernel(self.kernel_a)
        if self.kernel == "smoothed_attraction":
            return smoothed_attraction_kernel(self.kernel_a, self.kernel_eps)
        return zero_kernel()

    def y0(self):
        return np.array(self._floats(self.y0_mean))

    def resolved_text(self):
        lines = [f"{f.name} = {getattr(self, f.name)}" for f in fields(self)]
        return "\n".join(lines) + "\n"


def _prepare_out(cfg: ExperimentConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved.txt").write_text(cfg.resolved_text())
    (out / "VERSION").write_text(f"roughmf {__version__}\n")


def _write_driver_csv(path, driver):
    d = driver.dim
    head = ["time"] + [f"x1_{i + 1}" for i in range(d)]
    head += [f"x2_{i + 1}{j + 1}" for i in range(d) for j in range(d)]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(head) + "\n")
        for k in range(driver.n_times):
            row = [f"{driver.times[k]:.17g}"]
            row += [f"{v:.17g}" for v in driver.lvl1[k]]
            row += [f"{v:.17g}" for v in driver.lvl2[k].ravel()]
            fh.write(",".join(row) + "\n")


def _cmd_lift(cfg, out, threads):
    driver = sample_driver(cfg.spec(), cfg.lift_index)
    _write_driver_csv(out / "driver.csv", driver)
    print(f"lift written: {out / 'driver.csv'} (group defect {driver.max_group_defect():.3e})")
    return 0


def _cmd_solve(cfg, out, threads):
    driver = sample_driver(cfg.spec(), cfg.lift_index)
    est = estimate_error(cfg.fields_set(), None, driver, cfg.y0(), want_lift=True)
    sol = est.solution
    with open(out / "solution.csv", "w", newline="") as fh:
        fh.write("time," + ",".join(f"y{i + 1}" for i in range(sol.e)) + "\n")
        for k in range(sol.n_times):
            fh.write(
                f"{sol.times[k]:.17g}," + ",".join(f"{v:.17g}" for v in sol.states[k]) + "\n"
            )
    print(f"solution written: {out / 'solution.csv'} (step-doubling error {est.err_estimate:.3e})")
    return 0


def _reference_measure(cfg):
    if cfg.ref_checkpoint:
        return mean_field.load_measure(cfg.ref_checkpoint)
    ens = mean_field.sample_ensemble(cfg.spec(), range(cfg.m_ref), cfg.y0(), cfg.y0_std)
    report = mean_field.fixed_point(
        ens, cfg.fields_set(), cfg.kernel_set(), tol=cfg.tol, max_iter=cfg.max_iter
    )
    if not report.converged:
        raise DivergenceError(report.iterations)
    return report.final


def _cmd_fixed_point(cfg, out, threads):
    ens = mean_field.sample_ensemble(cfg.spec(), range(cfg.ensemble), cfg.y0(), cfg.y0_std)
    report = mean_field.fixed_point(
        ens, cfg.fields_set(), cfg.kernel_set(), tol=cfg.tol, max_iter=cfg.max_iter
    )
    with open(out / "fixed_point.csv", "w", newline="") as fh:
        fh.write("iteration,distance,ratio\n")
        for i, d in enumerate(report.distances):
            ratio = report.ratios[i - 1] if 0 < i <= len(report.ratios) else float("nan")
            fh.write(f"{i + 1},{d:.17g},{ratio:.17g}\n")
    mean_field.save_measure(report.final, out / "fixed_point_measure.npz")
    status = "converged" if report.converged else "NOT converged"
    print(f"fixed point {status} after {report.iterations} iterations")
    return 0 if report.converged else 3


def _cmd_finite(cfg, out, threads):
    spec = cfg.spec()
    paths = [sample_driver(spec, i) for i in range(cfg.finite_atoms)]
    nu = discrete_measure(np.full(cfg.finite_atoms, 1.0 / cfg.finite_atoms), paths)
    ens = mean_field.sample_ensemble(spec, range(cfg.finite_atoms), cfg.y0(), cfg.y0_std)
    vf, kern = cfg.fields_set(), cfg.kernel_set()
    sol_a = mean_field.solve_finite_support(nu, ens.y0s, vf, kern, ZERO_CROSS_AREA)
    sol_b = mean_field.solve_finite_support(nu, ens.y0s, vf, kern, JOINT_PIECEWISE_LINEAR)
    defect = float(np.max(np.abs(sol_a.states - sol_b.states)))
    ok = defect <= cfg.finite_tol
    (out / "finite_report.txt").write_text(
        f"policy_agreement: defect={defect:.6e} {'PASS' if ok else 'FAIL'}\n"
    )
    mean_field.save_measure(sol_a, out / "finite_measure.npz")
    print(f"finite-support agreement defect {defect:.3e}")
    return 0 if ok else 3


def _cmd_chaos(cfg, out, threads):
    reference = _reference_measure(cfg)
    if not cfg.ref_checkpoint:
        mean_field.save_measure(reference, out / "reference.npz")
    ns = [int(v) for v in cfg._floats(cfg.ns)]
    result = chaos_lab.chaos_sweep(
        ns,
        cfg.spec(),
        cfg.fields_set(),
        cfg.kernel_set(),
        reference,
        cfg.repeats,
        y0_mean=cfg.y0(),
        y0_std=cfg.y0_std,
        pathwise_cap=cfg.pathwise_cap,
        threads=threads,
    )
    result.write_csv(out / "chaos_sweep.csv")
    med = result.medians()
    print("median marginal distance by N:", {k: round(v, 6) for k, v in med.items()})
    print(f"log-log slope: {result.loglog_slope():.3f}")
    return 0


def _cmd_nu_cont(cfg, out, threads):
    eps = cfg._floats(cfg.eps_list)
    result = chaos_lab.nu_continuity_experiment(
        cfg.spec(),
        eps,
        cfg.fields_set(),
        cfg.kernel_set(),
        cfg.ensemble,
        y0_mean=cfg.y0(),
        y0_std=cfg.y0_std,
        tol=cfg.tol,
        max_iter=cfg.max_iter,
    )
    result.write_csv(out / "nu_continuity.csv")
    print("perturbation distances:", [(r.eps, round(r.distance, 8)) for r in result.rows])
    return 0


def _cmd_check(cfg, out, threads):
    report = chaos_lab.structure_checks(cfg.fields_set(), cfg.kernel_set(), cfg.spec())
    lines = [report.to_text().rstrip("\n")]
    spec = cfg.spec()
    alphas = cfg._floats(cfg.check_alphas)
    worst_margin = np.inf
    all_hold = True
    for i in range(cfg.check_lifts):
        path = sample_driver(spec, i)
        for alpha in alphas:
            rep = pvar_bound_check(path, cfg.check_p, alpha)
            all_hold &= rep.holds
            worst_margin = min(worst_margin, rep.rhs - rep.lhs)
    lines.append(
        f"pvar_bound_suite[{cfg.check_lifts} lifts x {len(alphas)} alphas]: "
        f"defect={max(0.0, -worst_margin):.6e} {'PASS' if all_hold else 'FAIL'}"
    )
    text = "\n".join(lines) + "\n"
    (out / "structure_checks.txt").write_text(text)
    print(text, end="")
    return 0 if report.all_passed and all_hold else 3


def _cmd_mgf(cfg, out, threads):
    rows = mean_field.mgf_diagnostic(
        cfg.spec(), cfg._floats(cfg.mgf_thetas), cfg.mgf_alpha, cfg.mgf_samples
    )
    with open(out / "mgf.csv", "w", newline="") as fh:
        fh.write("theta,estimate,std_error,max_share,heavy_tail\n")
        for r in rows:
            fh.write(
                f"{r.theta:.17g},{r.estimate:.17g},{r.std_error:.17g},"
                f"{r.max_share:.17g},{int(r.heavy_tail)}\n"
            )
    print(f"mgf table written: {out / 'mgf.csv'}")
    return 0


_COMMANDS = {
    "lift": _cmd_lift,
    "solve": _cmd_solve,
    "fixed-point": _cmd_fixed_point,
    "finite": _cmd_finite,
    "chaos": _cmd_chaos,
    "nu-cont": _cmd_nu_cont,
    "check": _cmd_check,
    "mgf": _cmd_mgf,
}


def run(argv) -> int:
    parser = argparse.ArgumentParser(prog="roughmf", description=__doc__)
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", type=str, default=None, help="flat key = value file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--out", type=str, default="out")
    args = parser.parse_args(argv)
    try:
        cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
    except (ConfigError, MismatchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        _prepare_out(cfg, out)
        return _COMMANDS[args.command](cfg, out, max(1, args.threads))
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, MismatchError, GridTooCoarseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run(None))


if __name__ == "__main__":
    main()
