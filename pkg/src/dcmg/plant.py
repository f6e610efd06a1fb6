"""Physical dynamics: RL lines, Buck-converter DGUs with RLC filters, ZIP loads,
and the assembled closed-loop model ``dX/dt = A X + b(V)``.

State layout: ``X = [V, I_t, v, I, Omega]`` with sizes N, N, N, M, N.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dcmg import control
from dcmg.errors import DimensionMismatch, MissingGains, NonPositiveVoltage
from dcmg.network import build_incidence, comm_laplacian


@dataclass(frozen=True)
class DguParams:
    """Filter resistance [ohm], inductance [H], capacitance [F], rated current [A]."""

    Rt: float
    Lt: float
    Ct: float
    rating: float

    def __post_init__(self):
        for name in ("Rt", "Lt", "Ct", "rating"):
            val = getattr(self, name)
            if not np.isfinite(val) or val <= 0:
                raise ValueError(f"DGU parameter {name} must be > 0, got {val}")


@dataclass(frozen=True)
class ZipLoad:
    """Conductance Y [S], constant current I [A], constant power P [W]."""

    Y: float = 0.0
    I: float = 0.0
    P: float = 0.0

    def __post_init__(self):
        if self.Y < 0:
            raise ValueError(f"load conductance must be >= 0, got {self.Y}")
        if self.P < 0:
            raise ValueError(f"load power must be >= 0, got {self.P}")

    def scaled_power(self, factor: float) -> "ZipLoad":
        return ZipLoad(self.Y, self.I, self.P * factor)


def zip_current(load: ZipLoad, V, v_min: float = 0.0):
    """Current drawn by a ZIP load at voltage ``V`` (scalar or array)."""
    V = np.asarray(V, dtype=float)
    if np.any(V <= v_min):
        bad = np.flatnonzero(np.atleast_1d(V) <= v_min)
        raise NonPositiveVoltage(bad, np.atleast_1d(V)[bad])
    out = load.Y * V + load.I + load.P / V
    return float(out) if out.ndim == 0 else out


@dataclass(eq=False)
class GlobalState:
    V: np.ndarray
    It: np.ndarray
    v: np.ndarray
    I: np.ndarray
    Omega: np.ndarray

    def __post_init__(self):
        for name in ("V", "It", "v", "I", "Omega"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(-1))
        n = len(self.V)
        if not (len(self.It) == len(self.v) == len(self.Omega) == n):
            raise DimensionMismatch("V, I_t, v and Omega must share one length")

    @property
    def N(self) -> int:
        return len(self.V)

    @property
    def M(self) -> int:
        return len(self.I)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.V, self.It, self.v, self.I, self.Omega])

    @classmethod
    def from_vector(cls, x, N: int, M: int) -> "GlobalState":
        x = np.asarray(x, dtype=float)
        if x.shape != (4 * N + M,):
            raise DimensionMismatch(f"state vector of length {x.shape} does not match 4N+M = {4 * N + M}")
        return cls(x[:N], x[N:2 * N], x[2 * N:3 * N], x[3 * N:3 * N + M], x[3 * N + M:])

    def copy(self) -> "GlobalState":
        return GlobalState(self.V.copy(), self.It.copy(), self.v.copy(), self.I.copy(), self.Omega.copy())


def state_slices(N: int, M: int) -> dict[str, slice]:
    return {
        "V": slice(0, N),
        "It": slice(N, 2 * N),
        "v": slice(2 * N, 3 * N),
        "I": slice(3 * N, 3 * N + M),
        "Omega": slice(3 * N + M, 4 * N + M),
    }


@dataclass(eq=False)
class SystemMatrices:
    """State matrix ``A`` plus the data needed to evaluate ``b(V)``.

    ``b(V) = [-(I_L + P_L/V)/C_t, 0, V_ref, 0, 0]``; the constant part is kept
    in ``b0`` and the constant-power coefficients in ``p_over_c``.
    """

    A: np.ndarray
    N: int
    M: int
    b0: np.ndarray
    p_over_c: np.ndarray
    v_min: float = 0.0
    active_lines: np.ndarray = field(default=None)
    comm_active: bool = True

    def injection(self, V) -> np.ndarray:
        b = self.b0.copy()
        b[: self.N] -= self.p_over_c / V
        return b

    def injection_jacobian(self, V) -> np.ndarray:
        """d b / d V, nonzero only on the V-block diagonal."""
        J = np.zeros_like(self.A)
        idx = np.arange(self.N)
        J[idx, idx] = self.p_over_c / np.asarray(V) ** 2
        return J


def assemble_system(spec, active_lines=None, comm_active: bool = True) -> SystemMatrices:
    """Build the closed-loop model for ``spec``.

    ``active_lines`` (boolean mask over lines) disconnects lines that are not yet
    plugged in: their columns of the incidence matrix are dropped and their
    currents are held constant. ``comm_active=False`` removes the secondary
    layer (Omega frozen, omega = 0).
    """
    N, M = spec.N, spec.M
    if spec.gains is None or len(spec.gains) != N:
        raise MissingGains("controller gains are required for every DGU")
    if len(spec.dgus) != N or len(spec.loads) != N or len(spec.v_ref) != N:
        raise DimensionMismatch("per-DGU sections must list exactly N entries")
    if spec.comm.node_count != N:
        raise DimensionMismatch("communication graph size differs from the electrical graph")

    B = build_incidence(spec.graph)
    if active_lines is None:
        active = np.ones(M, dtype=bool)
    else:
        active = np.asarray(active_lines, dtype=bool)
        if active.shape != (M,):
            raise DimensionMismatch("active_lines mask must have one entry per line")
    B = B * active

    Lc = comm_laplacian(spec.comm) if comm_active else np.zeros((N, N))
    Rt, Lt, Ct, Is = spec.Rt, spec.Lt, spec.Ct, spec.ratings
    k1, k2, k3, k4 = spec.gain_arrays()
    alpha = (k1 - 1.0) / Lt
    beta = (k2 - Rt) / Lt
    gamma = k3 / Lt
    delta = k4 / Lt
    Y = spec.load_arrays()[0]
    R, L = spec.graph.resistance, spec.graph.inductance
    R_eff = np.where(active, R, 0.0)

    s = state_slices(N, M)
    A = np.zeros((4 * N + M, 4 * N + M))
    A[s["V"], s["V"]] = np.diag(-Y / Ct)
    A[s["V"], s["It"]] = np.diag(1.0 / Ct)
    A[s["V"], s["I"]] = -B / Ct[:, None]
    A[s["It"], s["V"]] = np.diag(alpha)
    A[s["It"], s["It"]] = np.diag(beta)
    A[s["It"], s["v"]] = np.diag(gamma)
    A[s["It"], s["Omega"]] = (delta / Is)[:, None] * Lc
    A[s["v"], s["V"]] = -np.eye(N)
    A[s["v"], s["Omega"]] = -Lc / Is[:, None]
    A[s["I"], s["V"]] = B.T / L[:, None]
    A[s["I"], s["I"]] = np.diag(-R_eff / L)
    A[s["Omega"], s["It"]] = Lc / Is[None, :]

    _, IL, PL = spec.load_arrays()
    b0 = np.zeros(4 * N + M)
    b0[s["V"]] = -IL / Ct
    b0[s["v"]] = spec.v_ref
    return SystemMatrices(
        A=A,
        N=N,
        M=M,
        b0=b0,
        p_over_c=PL / Ct,
        v_min=spec.solver.v_min,
        active_lines=active,
        comm_active=comm_active,
    )


def full_rhs(matrices: SystemMatrices, state, check: bool = True) -> np.ndarray:
    """``A X + b(V)`` for a state vector or GlobalState."""
    x = state.to_vector() if isinstance(state, GlobalState) else np.asarray(state, dtype=float)
    V = x[: matrices.N]
    if check and np.any(V <= matrices.v_min):
        bad = np.flatnonzero(V <= matrices.v_min)
        raise NonPositiveVoltage(bad, V[bad])
    return matrices.A @ x + matrices.injection(V)


def line_rhs(state: GlobalState, graph, active_lines=None) -> np.ndarray:
    """Line-current derivatives from KVL, ``(-R I + B^T V) / L``."""
    B = build_incidence(graph)
    dI = (-graph.resistance * state.I + B.T @ state.V) / graph.inductance
    if active_lines is not None:
        dI = np.where(active_lines, dI, 0.0)
    return dI


def blockwise_rhs(spec, state: GlobalState, active_lines=None, comm_active: bool = True) -> GlobalState:
    """Per-equation evaluation of the closed loop, independent of ``assemble_system``.

    Walks every line and every DGU explicitly, computing the converter command
    from the controller law. Used to cross-check the matrix form.
    """
    N, M = spec.N, spec.M
    active = np.ones(M, dtype=bool) if active_lines is None else np.asarray(active_lines, dtype=bool)
    dI = np.zeros(M)
    injected = np.zeros(N)
    for l, (src, snk) in enumerate(spec.graph.edges):
        if not active[l]:
            continue
        R, L = spec.graph.resistance[l], spec.graph.inductance[l]
        # positive current is drawn out of the sink bus towards the source bus
        dI[l] = (-R * state.I[l] + state.V[snk] - state.V[src]) / L
        injected[snk] -= state.I[l]
        injected[src] += state.I[l]

    W = spec.comm.weights if comm_active else np.zeros((N, N))
    ratio = state.It / spec.ratings
    dV = np.zeros(N)
    dIt = np.zeros(N)
    dv = np.zeros(N)
    dOmega = np.zeros(N)
    for i in range(N):
        dgu, load, gains = spec.dgus[i], spec.loads[i], spec.gains[i]
        w_i = sum(W[i, j] * (state.Omega[i] - state.Omega[j]) for j in range(N) if j != i) / dgu.rating
        dOmega[i] = sum(W[i, j] * (ratio[i] - ratio[j]) for j in range(N) if j != i)
        i_load = load.Y * state.V[i] + load.I + load.P / state.V[i]
        dV[i] = (state.It[i] - i_load + injected[i]) / dgu.Ct
        Vt = control.primary_command(gains, (state.V[i], state.It[i], state.v[i]), w_i)
        dIt[i] = (-state.V[i] - dgu.Rt * state.It[i] + Vt) / dgu.Lt
        dv[i] = spec.v_ref[i] - state.V[i] - w_i
    return GlobalState(dV, dIt, dv, dI, dOmega)
