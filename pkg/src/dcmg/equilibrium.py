"""Steady states of the secondary-controlled microgrid.

At an equilibrium the filter currents are shared in proportion to the ratings
and the rating-weighted voltage sum equals that of the references. The bus
voltages then solve a DC power flow restricted to the balancing hyperplane,

    Lt_stack @ V = I_stack - Lt_proj_stack @ (P_L / V),

which is solved as a fixed point around the load-free solution ``V*``. The
critical-power matrix gives a sufficient condition (``Delta < 1``) for a unique
solution inside the band ``(1 -/+ d_minus) V*``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from dcmg.errors import (
    NoCertificate,
    NoConvergence,
    NonPositiveVoltage,
    OutOfBand,
    RankDeficient,
    SingularGamma,
    SingularNominal,
)
from dcmg.network import build_incidence, comm_laplacian, electrical_laplacian
from dcmg.plant import GlobalState, assemble_system, full_rhs, state_slices

log = logging.getLogger(__name__)


def pinv_checked(A, rank_tol=1e-10, expected_rank=None):
    """SVD pseudo-inverse with singular values below ``rank_tol * s_max`` dropped.

    Raises RankDeficient when the numerical rank is below ``expected_rank``.
    """
    U, s, Vt = np.linalg.svd(A, full_matrices=False)
    cutoff = rank_tol * (s[0] if s.size else 0.0)
    keep = s > cutoff
    rank = int(keep.sum())
    if expected_rank is not None and rank < expected_rank:
        raise RankDeficient(f"matrix has numerical rank {rank}, expected {expected_rank}")
    return (Vt[keep].T / s[keep]) @ U[:, keep].T, rank


@dataclass(eq=False)
class ConstrainedFlowSystem:
    """Matrices of the balancing-constrained power flow.

    ``Lp = Le + Lt [I^s]^-1 Y``, ``L_stack = [Lp; 1^T [I^s]]``,
    ``I_stack = [-Lt [I^s]^-1 I_L; 1^T [I^s] V_ref]``, ``Lt_stack = [Lt [I^s]^-1; 0]``,
    with the rating-weighted projector ``Lt = [I^s] - [I^s] 1 1^T [I^s] / (1^T I^s)``.
    """

    Le: np.ndarray
    Lt: np.ndarray
    Lp: np.ndarray
    L_stack: np.ndarray
    I_stack: np.ndarray
    Lt_stack: np.ndarray
    L_stack_pinv: np.ndarray
    ratings: np.ndarray
    v_ref: np.ndarray

    @property
    def N(self) -> int:
        return self.Lp.shape[0]

    @property
    def sensitivity(self) -> np.ndarray:
        """``L_stack^+ Lt_stack``: voltage response to constant-power currents."""
        return self.L_stack_pinv @ self.Lt_stack

    def residual(self, V, P_L) -> np.ndarray:
        V = np.asarray(V, dtype=float)
        return self.L_stack @ V - self.I_stack + self.Lt_stack @ (np.asarray(P_L, dtype=float) / V)


def rating_projector(ratings) -> np.ndarray:
    S = np.asarray(ratings, dtype=float)
    return np.diag(S) - np.outer(S, S) / S.sum()


def build_flow_system(spec, rank_tol=None) -> ConstrainedFlowSystem:
    rank_tol = spec.solver.rank_tol if rank_tol is None else rank_tol
    Is = spec.ratings
    Y, IL, _ = spec.load_arrays()
    Le = electrical_laplacian(spec.graph)
    Lt = rating_projector(Is)
    Lt_scaled = Lt / Is[None, :]
    Lp = Le + Lt_scaled * Y[None, :]
    L_stack = np.vstack([Lp, Is[None, :]])
    I_stack = np.concatenate([-Lt_scaled @ IL, [Is @ spec.v_ref]])
    Lt_stack = np.vstack([Lt_scaled, np.zeros((1, spec.N))])
    pinv, _ = pinv_checked(L_stack, rank_tol, expected_rank=spec.N)
    return ConstrainedFlowSystem(Le, Lt, Lp, L_stack, I_stack, Lt_stack, pinv, Is, np.array(spec.v_ref))


def nominal_voltage(system: ConstrainedFlowSystem, return_residual=False):
    """Least-squares solution ``V*`` of ``L_stack V = I_stack`` (no constant-power load)."""
    V_star = system.L_stack_pinv @ system.I_stack
    if return_residual:
        return V_star, float(np.max(np.abs(system.L_stack @ V_star - system.I_stack)))
    return V_star


@dataclass(eq=False)
class ExistenceCertificate:
    V_star: np.ndarray
    P_cri: np.ndarray
    Delta: float
    delta_minus: float
    delta_plus: float
    nominal_residual: float = 0.0

    @property
    def exists(self) -> bool:
        return self.Delta < 1.0

    @property
    def lower(self) -> np.ndarray:
        return (1.0 - self.delta_minus) * self.V_star

    @property
    def upper(self) -> np.ndarray:
        return (1.0 + self.delta_minus) * self.V_star

    @property
    def collapse_threshold(self) -> np.ndarray:
        """``(1 - d_plus) V*``: no solution lies above it outside the band."""
        return (1.0 - self.delta_plus) * self.V_star

    def in_band(self, V, rtol=1e-12) -> bool:
        slack = rtol * np.abs(self.V_star)
        V = np.asarray(V)
        return bool(np.all(V >= self.lower - slack) and np.all(V <= self.upper + slack))

    def low_voltage_set_excluded(self, v_ref) -> bool:
        """Whether the hypothesis ``(1 - d_plus) V* < V_ref`` holds, so that no
        solution exists at or below the collapse threshold either."""
        return self.exists and bool(np.all(self.collapse_threshold < np.asarray(v_ref)))

    def summary(self) -> dict:
        return {
            "Delta": self.Delta,
            "delta_minus": self.delta_minus,
            "delta_plus": self.delta_plus,
            "V_star_min": float(self.V_star.min()),
            "V_star_max": float(self.V_star.max()),
            "exists": self.exists,
        }


def deviation_roots(Delta: float) -> tuple[float, float]:
    """Roots of ``4 d (1 - d) = Delta`` ordered (small, large); NaN when Delta > 1."""
    if Delta > 1.0:
        return float("nan"), float("nan")
    root = np.sqrt(max(0.0, 1.0 - Delta))
    return (1.0 - root) / 2.0, (1.0 + root) / 2.0


def certificate(system: ConstrainedFlowSystem, P_L) -> ExistenceCertificate:
    """Critical-power certificate for the constant-power loads ``P_L``.

    Delta is the induced infinity-norm of ``P_cri [P_L]``, i.e. the largest row
    sum of ``|P_cri| P_L``.
    """
    P_L = np.asarray(P_L, dtype=float)
    V_star, res = nominal_voltage(system, return_residual=True)
    bad = np.flatnonzero(V_star <= 0)
    if bad.size:
        raise SingularNominal(bad, V_star[bad])
    P_cri = 4.0 * system.sensitivity / np.outer(V_star, V_star)
    Delta = float(np.max(np.abs(P_cri) @ np.abs(P_L)))
    d_minus, d_plus = deviation_roots(Delta)
    return ExistenceCertificate(V_star, P_cri, Delta, d_minus, d_plus, res)


@dataclass(eq=False)
class FixedPointResult:
    V: np.ndarray
    iterations: int
    increments: list[float] = field(repr=False)
    scaled_increments: list[float] = field(repr=False)
    contraction_ratio: float
    residual: float


def solve_voltage(
    system: ConstrainedFlowSystem,
    P_L,
    cert: ExistenceCertificate | None = None,
    V0=None,
    tol=1e-10,
    max_iter=10_000,
    residual_tol=1e-8,
) -> FixedPointResult:
    """Fixed-point iteration ``V <- V* - L_stack^+ Lt_stack (P_L / V)`` from ``V0``.

    Convergence means ``|V_{k+1} - V_k|_inf <= tol``. Increments measured in the
    ``V*``-scaled norm must contract at every step; a growing increment raises
    NoConvergence.
    """
    P_L = np.asarray(P_L, dtype=float)
    cert = certificate(system, P_L) if cert is None else cert
    if not cert.exists:
        raise NoCertificate(f"Delta = {cert.Delta:.6g} >= 1; no existence certificate")
    V_star = cert.V_star
    G = system.sensitivity
    V = V_star.copy() if V0 is None else np.array(V0, dtype=float)
    increments, scaled = [], []
    ratio = 0.0
    floor = 1e3 * np.finfo(float).eps
    for k in range(1, max_iter + 1):
        if np.any(V <= 0):
            bad = np.flatnonzero(V <= 0)
            raise NonPositiveVoltage(bad, V[bad])
        V_new = V_star - G @ (P_L / V)
        step = V_new - V
        inc = float(np.max(np.abs(step)))
        sc = float(np.max(np.abs(step / V_star)))
        if scaled and scaled[-1] > floor and sc > floor:
            r = sc / scaled[-1]
            ratio = max(ratio, r)
            if r >= 1.0:
                raise NoConvergence(f"fixed-point increments stopped contracting at iteration {k} (ratio {r:.3g})")
        increments.append(inc)
        scaled.append(sc)
        V = V_new
        if inc <= tol:
            break
    else:
        raise NoConvergence(f"no convergence within {max_iter} iterations (last increment {increments[-1]:.3g})")
    if not cert.in_band(V):
        raise OutOfBand("converged voltage lies outside the certified band")
    res = float(np.max(np.abs(system.residual(V, P_L))))
    if res > residual_tol:
        raise NoConvergence(f"power-flow residual {res:.3g} exceeds {residual_tol:.3g}")
    return FixedPointResult(V, k, increments, scaled, ratio, res)


def newton_voltage(system: ConstrainedFlowSystem, P_L, V0, tol=1e-10, max_iter=100):
    """Gauss-Newton on the stacked flow equations; diagnostic outside the certificate.

    Returns the converged voltage or None when the iteration fails.
    """
    P_L = np.asarray(P_L, dtype=float)
    V = np.array(V0, dtype=float)
    for _ in range(max_iter):
        if np.any(V <= 0) or not np.all(np.isfinite(V)):
            return None
        F = system.residual(V, P_L)
        J = system.L_stack - system.Lt_stack * (P_L / V**2)[None, :]
        dV, *_ = np.linalg.lstsq(J, -F, rcond=None)
        V = V + dV
        if np.max(np.abs(dV)) <= tol * max(1.0, np.max(np.abs(V))):
            if np.any(V <= 0) or np.max(np.abs(system.residual(V, P_L))) > 1e-6:
                return None
            return V
    return None


@dataclass
class ExclusionReport:
    seeds: int
    in_band: int
    elsewhere: int
    failed: int
    solutions_in_excluded_set: list = field(default_factory=list)


def exclusion_evidence(system, P_L, cert: ExistenceCertificate, seeds=50, rng=None) -> ExclusionReport:
    """Run Newton from random points above the collapse threshold but outside
    the band, and collect any solution that stays in that excluded region.

    A clean report is numerical evidence, not a proof.
    """
    rng = np.random.default_rng(rng)
    lo = cert.collapse_threshold
    hi = 2.0 * cert.V_star
    report = ExclusionReport(seeds, 0, 0, 0)
    drawn = 0
    while drawn < seeds:
        V0 = rng.uniform(lo, hi)
        if cert.in_band(V0) or np.any(V0 <= lo):
            continue
        drawn += 1
        V = newton_voltage(system, P_L, V0)
        if V is None:
            report.failed += 1
        elif cert.in_band(V, rtol=1e-9):
            report.in_band += 1
        elif np.all(V > lo):
            report.solutions_in_excluded_set.append(V)
        else:
            report.elsewhere += 1
    return report


@dataclass(eq=False)
class EquilibriumPoint:
    state: GlobalState
    epsilon: float
    eta: float
    residual: float

    @property
    def V(self):
        return self.state.V


def complete_equilibrium(spec, V_bar, omega_sum=0.0) -> EquilibriumPoint:
    """Fill in currents and controller states around a solved voltage ``V_bar``.

    ``omega_sum`` fixes the free offset of Omega (its sum is conserved along
    trajectories, so it equals the initial sum).
    """
    V = np.asarray(V_bar, dtype=float)
    N = spec.N
    Is = spec.ratings
    Y, IL, PL = spec.load_arrays()
    k1, k2, k3, k4 = spec.gain_arrays()
    if np.any(k3 == 0):
        raise SingularGamma(f"k3 = 0 at bus(es) {list(np.flatnonzero(k3 == 0) + 1)}")
    Lt_ = spec.Lt
    alpha, beta, gamma, delta = (k1 - 1) / Lt_, (k2 - spec.Rt) / Lt_, k3 / Lt_, k4 / Lt_

    total_load = float(np.sum(Y * V + IL + PL / V))
    epsilon = total_load / Is.sum()
    It = epsilon * Is
    B = build_incidence(spec.graph)
    I = (B.T @ V) / spec.graph.resistance
    Lc = comm_laplacian(spec.comm)
    Lc_pinv, _ = pinv_checked(Lc, spec.solver.rank_tol, expected_rank=N - 1)
    Omega = Lc_pinv @ (Is * (spec.v_ref - V))
    eta = (omega_sum - Omega.sum()) / N
    Omega = Omega + eta
    # integrator balance of the filter-current equation with omega = V_ref - V
    v = (-alpha * V - beta * It + delta * (V - spec.v_ref)) / gamma
    state = GlobalState(V, It, v, I, Omega)
    mats = assemble_system(spec)
    res = float(np.max(np.abs(full_rhs(mats, state, check=False))))
    return EquilibriumPoint(state, epsilon, eta, res)


def solve_equilibrium(spec, omega_sum=0.0, V0=None) -> EquilibriumPoint:
    """Certificate, fixed-point voltage solve and state completion in one call."""
    s = spec.solver
    system = build_flow_system(spec)
    P_L = spec.load_arrays()[2]
    cert = certificate(system, P_L)
    sol = solve_voltage(system, P_L, cert, V0=V0, tol=s.fixed_point_tol, max_iter=s.max_iter, residual_tol=s.residual_tol)
    return complete_equilibrium(spec, sol.V, omega_sum)


@dataclass(eq=False)
class StabilityReport:
    eigenvalues: np.ndarray
    reduced_eigenvalues: np.ndarray
    structural_residual: float
    max_real: float
    near_zero: int
    stable: bool
    p_load_margin_ok: bool

    @property
    def verdict(self) -> str:
        return "Stable" if self.stable else "Unstable"

    def summary(self) -> dict:
        slow = self.reduced_eigenvalues[np.argmax(self.reduced_eigenvalues.real)]
        return {
            "verdict": self.verdict,
            "max_real_nonstructural": self.max_real,
            "slowest_mode": complex(slow),
            "structural_residual": self.structural_residual,
            "eigenvalues_near_zero": self.near_zero,
            "p_load_bound_ok": self.p_load_margin_ok,
        }


def offset_direction(N: int, M: int) -> np.ndarray:
    z = np.zeros(4 * N + M)
    z[state_slices(N, M)["Omega"]] = 1.0 / np.sqrt(N)
    return z


def linearized_stability(spec, eq: EquilibriumPoint, tol=1e-9) -> StabilityReport:
    """Spectrum of the Jacobian at ``eq``.

    The common offset of Omega is an exact zero mode (its sum is conserved and
    feeds nothing back). The Jacobian splits orthogonally into that direction
    and its complement, so stability is decided on the complement's spectrum;
    the full spectrum is reported alongside.
    """
    N, M = spec.N, spec.M
    mats = assemble_system(spec)
    J = mats.A + mats.injection_jacobian(eq.V)
    z = offset_direction(N, M)
    structural = float(max(np.max(np.abs(J @ z)), np.max(np.abs(z @ J))))

    # orthonormal basis of the complement of the offset direction
    basis = np.linalg.qr(np.column_stack([np.ones(N), np.eye(N)[:, : N - 1]]))[0][:, 1:]
    n_fast = 3 * N + M
    T = np.zeros((4 * N + M, 4 * N + M - 1))
    T[:n_fast, :n_fast] = np.eye(n_fast)
    T[n_fast:, n_fast:] = basis
    reduced = np.linalg.eigvals(T.T @ J @ T)
    full = np.linalg.eigvals(J)
    max_real = float(np.max(reduced.real)) if reduced.size else -np.inf
    near_zero = int(np.sum(full.real > -tol))
    _, _, PL = spec.load_arrays()
    Y = spec.load_arrays()[0]
    margin_ok = bool(np.all(PL < Y * eq.V**2))
    stable = structural <= tol and max_real < -tol
    return StabilityReport(full, reduced, structural, max_real, near_zero, stable, margin_ok)
