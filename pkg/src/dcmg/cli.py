"""Command-line entry point: ``dcmg check|solve|run|sweep``.

Exit codes: 0 success, 1 config error, 2 certificate / gain / stability
failure, 3 voltage collapse, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dcmg.config import load_spec
from dcmg.control import validate_gains
from dcmg.equilibrium import (
    build_flow_system,
    certificate,
    complete_equilibrium,
    linearized_stability,
    solve_voltage,
)
from dcmg.errors import ConfigError, DcmgError
from dcmg.simulate import (
    CONVERGED,
    NOT_SETTLED,
    NUMERICAL_FAILURE,
    VOLTAGE_COLLAPSE,
    compute_metrics,
    integrate,
    phase_certificates,
    steady_state_of,
)

log = logging.getLogger("dcmg")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CERTIFICATE = 2
EXIT_COLLAPSE = 3
EXIT_NUMERICAL = 4

FMT = "%.12g"


def state_header(N: int, M: int) -> list[str]:
    cols = ["t"]
    for block, n in (("V", N), ("It", N), ("v", N), ("I", M), ("Omega", N)):
        cols += [f"{block}_{i + 1}" for i in range(n)]
    return cols


def write_csv(path, header, columns) -> None:
    data = np.column_stack([np.asarray(c, dtype=float) for c in columns]) if columns else np.empty((0, 0))
    np.savetxt(path, data, fmt=FMT, delimiter=",", header=",".join(header), comments="")


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, complex):
        return f"{FMT % x.real}{'+' if x.imag >= 0 else '-'}{FMT % abs(x.imag)}j"
    if isinstance(x, (float, int, np.floating, np.integer)):
        return FMT % x
    if isinstance(x, (list, tuple, np.ndarray)):
        return "[" + ", ".join(fmt(v) for v in x) + "]"
    return str(x)


@dataclass
class RunReport:
    name: str
    certificate: dict | None = None
    certificate_error: str = ""
    gains: list[dict] = field(default_factory=list)
    equilibrium: dict | None = None
    stability: dict | None = None
    files: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)
    verdict: str = ""
    message: str = ""

    def gains_ok(self) -> bool:
        return all(g["valid"] for g in self.gains)

    def to_text(self) -> str:
        out = [f"config: {self.name}"]
        out.append("[gains]")
        for g in self.gains:
            line = f"dgu {g['bus']}: k = {fmt(g['k'])} valid={g['valid']} consensus_damped={g['consensus_damped']}"
            out.append(line)
            out += [f"  violation: {v}" for v in g["violations"]]
        out.append("[certificate]")
        if self.certificate is not None:
            out += [f"{k} = {fmt(v)}" for k, v in self.certificate.items()]
        if self.certificate_error:
            out.append(f"error = {self.certificate_error}")
        if self.equilibrium is not None:
            out.append("[equilibrium]")
            out += [f"{k} = {fmt(v)}" for k, v in self.equilibrium.items()]
        if self.stability is not None:
            out.append("[stability]")
            out += [f"{k} = {fmt(v)}" for k, v in self.stability.items()]
        if self.files:
            out.append("[files]")
            out += [f"{k} = {v}" for k, v in self.files.items()]
        if self.metrics:
            out.append("[terminal metrics]")
            out += [f"{k} = {fmt(v)}" for k, v in self.metrics.items()]
        if self.verdict:
            out.append("[run]")
            out.append(f"verdict = {self.verdict}")
            if self.message:
                out.append(f"message = {self.message}")
        return "\n".join(out) + "\n"


def analyse(spec, report: RunReport):
    """Fill gain verdicts, certificate, equilibrium and stability; returns the
    equilibrium point or None."""
    for i, (g, dgu) in enumerate(zip(spec.gains, spec.dgus)):
        verdict = validate_gains(g, dgu)
        report.gains.append(
            {
                "bus": i + 1,
                "k": list(g.as_tuple()),
                "valid": verdict.valid,
                "consensus_damped": verdict.consensus_damped,
                "violations": list(verdict.violations),
            }
        )
    P_L = spec.load_arrays()[2]
    try:
        system = build_flow_system(spec)
        cert = certificate(system, P_L)
    except DcmgError as exc:
        report.certificate_error = f"{type(exc).__name__}: {exc}"
        return None
    report.certificate = cert.summary()
    if not cert.exists:
        report.certificate_error = f"NoCertificate: Delta = {cert.Delta:.6g} >= 1"
        return None
    s = spec.solver
    try:
        sol = solve_voltage(system, P_L, cert, tol=s.fixed_point_tol, max_iter=s.max_iter, residual_tol=s.residual_tol)
        eq = complete_equilibrium(spec, sol.V)
    except DcmgError as exc:
        report.certificate_error = f"{type(exc).__name__}: {exc}"
        return None
    st = eq.state
    report.equilibrium = {
        "V": st.V,
        "It": st.It,
        "epsilon": eq.epsilon,
        "I": st.I,
        "v": st.v,
        "Omega": st.Omega,
        "fixed_point_iterations": sol.iterations,
        "voltage_residual": sol.residual,
        "state_residual": eq.residual,
        "p_load_bound": bool(np.all(P_L < spec.load_arrays()[0] * st.V**2)),
    }
    if eq.residual > s.residual_tol:
        log.warning("equilibrium residual %.3g exceeds %.3g", eq.residual, s.residual_tol)
    try:
        report.stability = linearized_stability(spec, eq).summary()
    except DcmgError as exc:
        report.stability = {"verdict": f"unavailable ({exc})"}
    return eq


def cmd_check(args) -> int:
    spec = load_spec(args.config)
    report = RunReport(spec.name)
    eq = analyse(spec, report)
    sys.stdout.write(report.to_text())
    if not report.gains_ok() or eq is None:
        return EXIT_CERTIFICATE
    if report.stability.get("verdict") != "Stable":
        return EXIT_CERTIFICATE
    return EXIT_OK


def cmd_solve(args) -> int:
    spec = load_spec(args.config)
    report = RunReport(spec.name)
    eq = analyse(spec, report)
    if eq is None:
        sys.stdout.write(report.to_text())
        return EXIT_NUMERICAL if report.certificate_error.startswith("NoConvergence") else EXIT_CERTIFICATE
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    st = eq.state
    N, M = spec.N, spec.M
    bus = np.arange(1, N + 1)
    write_csv(out / "equilibrium.csv", ["bus", "V", "It", "v", "Omega"], [bus, st.V, st.It, st.v, st.Omega])
    write_csv(out / "equilibrium_lines.csv", ["line", "I"], [np.arange(1, M + 1), st.I])
    report.files = {
        "equilibrium": str(out / "equilibrium.csv"),
        "equilibrium_lines": str(out / "equilibrium_lines.csv"),
    }
    text = report.to_text()
    (out / "equilibrium.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def plot_script(spec, report: RunReport) -> str:
    cert = report.certificate
    if cert is not None and cert["exists"]:
        dm = cert["delta_minus"]
        band = f"V_MAX = {FMT % ((1 + dm) * cert['V_star_max'])}\nV_MIN = {FMT % ((1 - dm) * cert['V_star_min'])}\n"
    else:
        band = "V_MAX = None\nV_MIN = None\n"
    return f'''"""Three-panel figure of a dcmg run: PC voltages with the certified band,
weighted filter currents, weighted voltage sum against its reference."""

import sys
from pathlib import Path

import matplotlib.pyplot as plt
import numpy as np

HERE = Path(__file__).resolve().parent
N = {spec.N}
RATINGS = np.array({fmt(spec.ratings)})
V_REF = np.array({fmt(np.asarray(spec.v_ref))})
{band}

data = np.genfromtxt(HERE / "trajectory.csv", delimiter=",", names=True)
t = data["t"]
V = np.column_stack([data[f"V_{{i + 1}}"] for i in range(N)])
It = np.column_stack([data[f"It_{{i + 1}}"] for i in range(N)])

fig, ax = plt.subplots(3, 1, sharex=True, figsize=(7, 8))
for i in range(N):
    ax[0].plot(t, V[:, i], label=f"V_{{i + 1}}")
    ax[1].plot(t, It[:, i] / RATINGS[i], label=f"I_t{{i + 1}} / I_s{{i + 1}}")
if V_MAX is not None:
    ax[0].axhline(V_MAX, color="k", ls="--", lw=0.8, label="V max")
    ax[0].axhline(V_MIN, color="k", ls=":", lw=0.8, label="V min")
ax[0].set_ylabel("voltage [V]")
ax[1].set_ylabel("weighted current")
ax[2].plot(t, V @ RATINGS, label="sum I_s V")
ax[2].plot(t, np.full_like(t, V_REF @ RATINGS), "k--", label="sum I_s V_ref")
ax[2].set_ylabel("weighted voltage sum")
ax[2].set_xlabel("time [s]")
for a in ax:
    a.legend(fontsize=7, ncol=2)
    a.grid(True, lw=0.3)
fig.tight_layout()
out = sys.argv[1] if len(sys.argv) > 1 else HERE / "figures.png"
fig.savefig(out, dpi=150)
'''


def run_scenario(spec, out: Path, dt=None, t_end=None, decimation=None) -> tuple[int, RunReport]:
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(spec.name)
    analyse(spec, report)
    traj = integrate(spec, dt=dt, t_end=t_end, decimation=decimation)
    metrics = compute_metrics(traj, spec, phase_certificates(traj))

    header = state_header(spec.N, spec.M)
    write_csv(out / "trajectory.csv", header, [traj.times] + list(traj.states.T))
    write_csv(
        out / "metrics.csv",
        ["t", "sharing_error", "balancing_error", "band_violation"],
        [metrics.times, metrics.sharing_error, metrics.balancing_error, metrics.band_violation],
    )
    (out / "plot_figures.py").write_text(plot_script(spec, report))
    report.files = {
        "trajectory": str(out / "trajectory.csv"),
        "metrics": str(out / "metrics.csv"),
        "plot_script": str(out / "plot_figures.py"),
    }
    report.metrics = metrics.terminal()
    report.message = traj.message

    code = EXIT_OK
    if traj.verdict == VOLTAGE_COLLAPSE:
        report.verdict = VOLTAGE_COLLAPSE
        report.metrics["collapse_bus"] = traj.collapse_bus + 1
        report.metrics["collapse_time"] = traj.collapse_time
        code = EXIT_COLLAPSE
    elif traj.verdict == NUMERICAL_FAILURE:
        report.verdict = NUMERICAL_FAILURE
        code = EXIT_NUMERICAL
    else:
        span = traj.times[-1] - traj.times[0]
        window = 0.1 * span
        try:
            ss = steady_state_of(traj, window, tol=spec.solver.settle_tol)
            report.verdict = CONVERGED if ss.settled else NOT_SETTLED
            report.metrics["settle_rate"] = ss.max_rate
        except ValueError as exc:
            report.verdict = NOT_SETTLED
            report.message = str(exc)
    (out / "report.txt").write_text(report.to_text())
    return code, report


def cmd_run(args) -> int:
    spec = load_spec(args.config)
    code, report = run_scenario(spec, Path(args.output), args.dt, args.t_end, args.decimation)
    sys.stdout.write(report.to_text())
    return code


def _sweep_one(path: str, out: str) -> tuple[str, int, str]:
    try:
        spec = load_spec(path)
        code, report = run_scenario(spec, Path(out) / Path(path).stem)
        return path, code, report.verdict
    except ConfigError as exc:
        return path, EXIT_CONFIG, f"ConfigError: {exc}"
    except DcmgError as exc:
        return path, EXIT_NUMERICAL, f"{type(exc).__name__}: {exc}"


def cmd_sweep(args) -> int:
    paths = sorted(glob.glob(args.pattern))
    if not paths:
        log.error("no config matches %s", args.pattern)
        return EXIT_CONFIG
    with ProcessPoolExecutor(max_workers=args.workers) as pool:
        results = list(pool.map(_sweep_one, paths, [args.output] * len(paths)))
    for path, code, verdict in results:
        print(f"{path}\texit={code}\t{verdict}")
    return max(code for _, code, _ in results)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcmg", description="DC microgrid secondary-control analysis and simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="gain, existence and stability certificates")
    p.add_argument("config")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("solve", help="solve the secondary-control equilibrium")
    p.add_argument("config")
    p.add_argument("-o", "--output", default=".", help="output directory (default: .)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("run", help="simulate the config scenario")
    p.add_argument("config")
    p.add_argument("-o", "--output", default=".", help="output directory (default: .)")
    p.add_argument("--dt", type=float, help="override the integration step [s]")
    p.add_argument("--t-end", type=float, help="override the final time [s]")
    p.add_argument("--decimation", type=int, help="store every k-th step")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run every config matching a glob in a worker pool")
    p.add_argument("pattern")
    p.add_argument("-o", "--output", default=".", help="output root; one subdirectory per config")
    p.add_argument("-w", "--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("DCMG_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DcmgError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
