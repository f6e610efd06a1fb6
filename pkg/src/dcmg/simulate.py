"""Fixed-step RK4 integration of the closed loop with timed scenario events,
plus the current-sharing / voltage-balancing metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from dcmg.control import closed_loop_coefficients
from dcmg.errors import NotSettled
from dcmg.plant import GlobalState, assemble_system, state_slices, zip_current

log = logging.getLogger(__name__)

CONVERGED = "Converged"
VOLTAGE_COLLAPSE = "VoltageCollapse"
NUMERICAL_FAILURE = "NumericalFailure"
NOT_SETTLED = "NotSettled"

# numpy >= 2 renamed trapz
_trapezoid = getattr(np, "trapezoid", None) or np.trapz

# extent of the RK4 stability region along the negative real axis
RK4_REAL_LIMIT = 2.785


@dataclass(eq=False)
class Phase:
    """Plant configuration in force from ``time`` until the next phase."""

    time: float
    spec: object
    active_lines: np.ndarray
    comm_active: bool


@dataclass(eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    N: int
    M: int
    phases: list[Phase]
    phase_index: np.ndarray
    verdict: str = CONVERGED
    collapse_bus: int | None = None
    collapse_time: float | None = None
    message: str = ""

    def __len__(self):
        return len(self.times)

    def block(self, name: str) -> np.ndarray:
        return self.states[:, state_slices(self.N, self.M)[name]]

    def state(self, k: int) -> GlobalState:
        return GlobalState.from_vector(self.states[k], self.N, self.M)

    @property
    def final(self) -> GlobalState:
        return self.state(-1)

    def v_ref_samples(self) -> np.ndarray:
        refs = np.array([p.spec.v_ref for p in self.phases])
        return refs[self.phase_index]


def primary_steady_state(spec) -> GlobalState:
    """Every DGU at its own primary-control equilibrium: V = V_ref, no line
    current, filter current equal to the local load, Omega = 0."""
    N, M = spec.N, spec.M
    V = np.array(spec.v_ref, dtype=float)
    It = np.array([zip_current(load, V[i]) for i, load in enumerate(spec.loads)])
    v = np.empty(N)
    for i in range(N):
        a, b, g, _ = closed_loop_coefficients(spec.gains[i], spec.dgus[i])
        v[i] = -(a * V[i] + b * It[i]) / g
    return GlobalState(V, It, v, np.zeros(M), np.zeros(N))


def initial_state(spec) -> GlobalState:
    mode = spec.scenario.initial
    if mode == "isolated_primary":
        return primary_steady_state(spec)
    if mode == "equilibrium":
        from dcmg.equilibrium import solve_equilibrium

        return solve_equilibrium(spec).state
    raise ValueError(f"unknown initial mode {mode!r}")


class _Stepper:
    """RK4 on ``x' = A x + b0 - [p/V; 0]`` with the matrices of one phase."""

    def __init__(self, mats):
        self.A = mats.A
        self.b0 = mats.b0
        self.pc = mats.p_over_c
        self.N = mats.N
        self.v_min = mats.v_min

    def f(self, x):
        d = self.A @ x + self.b0
        d[: self.N] -= self.pc / x[: self.N]
        return d

    def step(self, x, h):
        f = self.f
        k1 = f(x)
        k2 = f(x + 0.5 * h * k1)
        k3 = f(x + 0.5 * h * k2)
        k4 = f(x + h * k3)
        return x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    def stage_minimum(self, x, h):
        """Lowest bus voltage (value, bus) over the RK4 stage points of one step."""
        N = self.N
        k1 = self.f(x)
        x2 = x + 0.5 * h * k1
        k2 = self.f(x2)
        x3 = x + 0.5 * h * k2
        x4 = x + h * self.f(x3)
        V = np.vstack([x[:N], x2[:N], x3[:N], x4[:N]])
        V = np.where(np.isfinite(V), V, -np.inf)
        flat = int(np.argmin(V))
        return float(V.flat[flat]), flat % N


def _apply_event(event, spec, active, comm_active):
    kind = event.kind
    if kind == "plug_in":
        active = active.copy()
        if event.lines is None:
            active[:] = True
        else:
            active[list(event.lines)] = True
    elif kind == "load_step":
        spec = spec.with_load(event.bus, event.load)
    elif kind == "comm_collapse":
        comm_active = False
    elif kind == "comm_restore":
        comm_active = True
    elif kind == "set_reference":
        spec = spec.with_reference(event.bus, event.value)
    return spec, active, comm_active


def integrate(spec, initial=None, events=None, t_end=None, dt=None, decimation=None, t_start=None) -> Trajectory:
    """Integrate the scenario of ``spec`` (arguments override its settings).

    Events land exactly on their timestamps: a step that straddles an event is
    split there. A bus voltage at or below ``solver.v_min`` stops the run with
    a VoltageCollapse verdict; the trajectory up to that point is returned.
    """
    sc = spec.scenario
    dt = spec.solver.dt if dt is None else float(dt)
    decimation = spec.solver.decimation if decimation is None else int(decimation)
    t0 = sc.t_start if t_start is None else float(t_start)
    t_end = sc.t_end if t_end is None else float(t_end)
    events = list(sc.events if events is None else events)
    if dt <= 0:
        raise ValueError("dt must be > 0")
    if any(b.time < a.time for a, b in zip(events, events[1:])):
        raise ValueError("events must be sorted by time")
    if initial is None:
        x = initial_state(spec).to_vector()
    elif isinstance(initial, GlobalState):
        x = initial.to_vector()
    else:
        x = np.array(initial, dtype=float)
    N, M = spec.N, spec.M
    if x.shape != (4 * N + M,):
        raise ValueError(f"initial state has shape {x.shape}, expected ({4 * N + M},)")

    active = np.full(M, bool(sc.lines_active))
    comm_active = bool(sc.comm_active)
    cur = spec
    phases: list[Phase] = []

    def new_phase(t):
        phases.append(Phase(t, cur, active.copy(), comm_active))
        mats = assemble_system(cur, active, comm_active)
        rho = dt * np.max(np.abs(np.linalg.eigvals(mats.A)))
        if rho > RK4_REAL_LIMIT:
            log.warning("dt * |lambda|max = %.3g exceeds the RK4 stability limit %.3g; expect divergence", rho, RK4_REAL_LIMIT)
        return _Stepper(mats)

    times, samples, phase_of = [], [], []

    def record(t, state):
        if times and t <= times[-1]:
            samples[-1] = state.copy()
            phase_of[-1] = len(phases) - 1
            return
        times.append(t)
        samples.append(state.copy())
        phase_of.append(len(phases) - 1)

    n_steps = int(np.ceil((t_end - t0) / dt - 1e-9))
    eps = 1e-12 * max(1.0, abs(t_end))
    ev_i = 0
    stepper = None
    verdict, bus, t_collapse, message = CONVERGED, None, None, ""
    t, k = t0, 0
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        while True:
            if stepper is None or (ev_i < len(events) and events[ev_i].time <= t + eps):
                while ev_i < len(events) and events[ev_i].time <= t + eps:
                    cur, active, comm_active = _apply_event(events[ev_i], cur, active, comm_active)
                    ev_i += 1
                stepper = new_phase(t)
                record(t, x)
            if k >= n_steps:
                break
            t_grid = min(t0 + (k + 1) * dt, t_end)
            t_target = t_grid
            if ev_i < len(events) and events[ev_i].time < t_grid - eps:
                t_target = events[ev_i].time
            x_new = stepper.step(x, t_target - t)
            finite = bool(np.all(np.isfinite(x_new)))
            if not finite or x_new[:N].min() <= stepper.v_min:
                lo, lo_bus = stepper.stage_minimum(x, t_target - t)
                # a physical collapse moves V smoothly; a jump of the order of V
                # itself within one step means the explicit scheme diverged
                jump = np.max(np.abs(x_new[:N] - x[:N])) if finite else np.inf
                smooth = jump <= 0.5 * np.max(np.abs(x[:N]))
                if smooth and (finite or lo <= stepper.v_min):
                    verdict, t_collapse = VOLTAGE_COLLAPSE, t_target
                    bus = int(np.argmin(x_new[:N])) if finite else lo_bus
                    message = f"bus {bus + 1} voltage reached the {stepper.v_min:g} V floor at t = {t_target:.6g} s"
                    if finite:
                        record(t_target, x_new)
                else:
                    verdict = NUMERICAL_FAILURE
                    message = f"integration diverged at t = {t_target:.6g} s (reduce dt)"
                break
            x, t = x_new, t_target
            if t_target == t_grid:
                k += 1
                if k % decimation == 0 or k == n_steps:
                    record(t, x)

    if verdict == VOLTAGE_COLLAPSE:
        log.warning(message)
    return Trajectory(
        times=np.array(times),
        states=np.array(samples),
        N=N,
        M=M,
        phases=phases,
        phase_index=np.array(phase_of, dtype=int),
        verdict=verdict,
        collapse_bus=bus,
        collapse_time=t_collapse,
        message=message,
    )


@dataclass(eq=False)
class Metrics:
    times: np.ndarray
    sharing_error: np.ndarray
    balancing_error: np.ndarray
    band_violation: np.ndarray = field(default=None)

    def terminal(self) -> dict:
        out = {
            "sharing_error": float(self.sharing_error[-1]),
            "balancing_error": float(self.balancing_error[-1]),
        }
        if self.band_violation is not None:
            out["band_violation"] = float(self.band_violation[-1])
        return out


def sharing_error(It, ratings) -> np.ndarray:
    """``max_ij |I_ti/I^s_i - I_tj/I^s_j|`` per sample."""
    r = np.atleast_2d(It) / np.asarray(ratings)
    return r.max(axis=1) - r.min(axis=1)


def balancing_error(V, v_ref, ratings) -> np.ndarray:
    """``|sum_i I^s_i (V_i - V_ref,i)|`` per sample."""
    return np.abs((np.atleast_2d(V) - np.atleast_2d(v_ref)) @ np.asarray(ratings))


def band_distance(V, cert) -> np.ndarray:
    """How far each sample lies outside ``[(1-d)V*, (1+d)V*]`` (0 when inside)."""
    V = np.atleast_2d(V)
    below = cert.lower[None, :] - V
    above = V - cert.upper[None, :]
    return np.maximum(np.maximum(below, above), 0.0).max(axis=1)


def compute_metrics(traj: Trajectory, spec, certificate=None) -> Metrics:
    """Metrics along ``traj``.

    ``certificate`` may be a single ExistenceCertificate or a list of
    ``(t_from, certificate_or_None)`` pairs; samples not covered by a
    certificate get NaN band violation.
    """
    ratings = spec.ratings
    V = traj.block("V")
    share = sharing_error(traj.block("It"), ratings)
    bal = balancing_error(V, traj.v_ref_samples(), ratings)
    band = None
    if certificate is not None:
        if isinstance(certificate, (list, tuple)):
            band = np.full(len(traj), np.nan)
            for j, (t_from, cert) in enumerate(certificate):
                t_to = certificate[j + 1][0] if j + 1 < len(certificate) else np.inf
                sel = (traj.times >= t_from) & (traj.times < t_to)
                if cert is not None and sel.any():
                    band[sel] = band_distance(V[sel], cert)
        else:
            band = band_distance(V, certificate)
    return Metrics(traj.times, share, bal, band)


@dataclass(eq=False)
class SteadyState:
    state: GlobalState
    settled: bool
    max_rate: float
    scale: float


def steady_state_of(traj: Trajectory, window: float, tol=1e-6, strict=False) -> SteadyState:
    """Settling test over the last ``window`` seconds.

    Settled when the largest finite-difference rate of any state component in
    the window is at most ``tol`` times the largest state magnitude there. The
    returned state is the time average over the window.
    """
    span = traj.times[-1] - traj.times[0]
    if not 0 < window < span:
        raise ValueError("window must be positive and shorter than the trajectory")
    sel = traj.times >= traj.times[-1] - window
    t = traj.times[sel]
    X = traj.states[sel]
    if len(t) < 2:
        raise ValueError("window contains fewer than two samples")
    rates = np.abs(np.diff(X, axis=0) / np.diff(t)[:, None])
    max_rate = float(rates.max())
    scale = float(max(np.abs(X).max(), np.finfo(float).tiny))
    settled = max_rate <= tol * scale
    mean = _trapezoid(X, t, axis=0) / (t[-1] - t[0])
    out = SteadyState(GlobalState.from_vector(mean, traj.N, traj.M), settled, max_rate, scale)
    if strict and not settled:
        raise NotSettled(f"max rate {max_rate:.3g} exceeds {tol:g} x {scale:.3g} over the final {window:g} s")
    return out


def phase_certificates(traj: Trajectory):
    """``(t_from, certificate)`` per phase; None where the secondary layer is
    off, lines are missing, or no certificate exists."""
    from dcmg.equilibrium import build_flow_system, certificate
    from dcmg.errors import DcmgError

    out = []
    cache = {}
    for ph in traj.phases:
        cert = None
        if ph.comm_active and ph.active_lines.all():
            key = id(ph.spec)
            if key not in cache:
                try:
                    c = certificate(build_flow_system(ph.spec), ph.spec.load_arrays()[2])
                    cache[key] = c if c.exists else None
                except DcmgError:
                    cache[key] = None
            cert = cache[key]
        out.append((ph.time, cert))
    return out
