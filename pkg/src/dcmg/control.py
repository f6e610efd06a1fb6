"""Primary PI voltage regulators, the consensus secondary layer, and gain design.

Each DGU runs the state-feedback law

    V_t = k1*V + k2*I_t + k3*v + k4*omega

where ``v`` integrates ``V_ref - V - omega`` and ``omega`` is the consensus
variable built from the neighbours' integrator states ``Omega``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ControllerGains:
    k1: float
    k2: float
    k3: float
    k4: float

    def as_tuple(self):
        return (self.k1, self.k2, self.k3, self.k4)


@dataclass(frozen=True)
class GainVerdict:
    """Outcome of checking one DGU's gains.

    ``in_set`` is membership of (k1, k2, k3) in the decentralized stabilizing
    set; ``coupled`` is ``k4 == k1``. ``consensus_damped`` flags the extra
    condition ``k1 < 0`` and ``k3 < k1 (k2 - R_t) / L_t`` under which the
    consensus loop keeps its damping for arbitrarily strong communication
    weights. It is advisory and does not enter ``valid``.
    """

    in_set: bool
    coupled: bool
    consensus_damped: bool
    k3_upper: float
    violations: tuple[str, ...] = field(default=())

    @property
    def valid(self) -> bool:
        return self.in_set and self.coupled


def k3_upper_bound(k1, k2, dgu) -> float:
    return (k1 - 1.0) * (k2 - dgu.Rt) / dgu.Lt


def validate_gains(gains: ControllerGains, dgu) -> GainVerdict:
    k1, k2, k3, k4 = gains.as_tuple()
    upper = k3_upper_bound(k1, k2, dgu)
    violations = []
    if not k1 < 1.0:
        violations.append(f"k1 = {k1:g} must be < 1")
    if not k2 < dgu.Rt:
        violations.append(f"k2 = {k2:g} must be < R_t = {dgu.Rt:g}")
    if not k3 > 0.0:
        violations.append(f"k3 = {k3:g} must be > 0")
    if not k3 < upper:
        violations.append(f"k3 = {k3:g} must be < (k1-1)(k2-R_t)/L_t = {upper:g}")
    in_set = not violations
    coupled = k4 == k1
    if not coupled:
        violations.append(f"k4 = {k4:g} differs from k1 = {k1:g}; outside the stability guarantee")
    damped = in_set and k1 < 0.0 and k3 < k1 * (k2 - dgu.Rt) / dgu.Lt
    return GainVerdict(in_set, coupled, damped, upper, tuple(violations))


def synthesize_gains(dgu, margins=(0.5, 0.5, 0.5), scales=None) -> ControllerGains:
    """Place gains strictly inside the stabilizing set using local data only.

    k1 = 1 - m1*s1, k2 = R_t - m2*s2, k3 = m3 * (k1-1)(k2-R_t)/L_t, k4 = k1.
    Default scales are s1 = 6 and s2 = 2*R_t, which gives k1 = -2, k2 = 0 and
    k3 = 1.5 R_t/L_t with the default margins.
    """
    m1, m2, m3 = (float(m) for m in margins)
    for m in (m1, m2, m3):
        if not 0.0 < m < 1.0:
            raise ValueError(f"margins must lie in (0, 1), got {margins}")
    if scales is None:
        s1, s2 = 6.0, 2.0 * dgu.Rt
    else:
        s1, s2 = (float(s) for s in scales)
    if s1 <= 0 or s2 <= 0:
        raise ValueError("gain scales must be positive")
    k1 = 1.0 - m1 * s1
    k2 = dgu.Rt - m2 * s2
    k3 = m3 * k3_upper_bound(k1, k2, dgu)
    return ControllerGains(k1, k2, k3, k1)


def closed_loop_coefficients(gains: ControllerGains, dgu):
    """(alpha, beta, gamma, delta) of the closed-loop filter-current equation."""
    return (
        (gains.k1 - 1.0) / dgu.Lt,
        (gains.k2 - dgu.Rt) / dgu.Lt,
        gains.k3 / dgu.Lt,
        gains.k4 / dgu.Lt,
    )


def consensus_rhs(It, ratings, comm_laplacian) -> np.ndarray:
    """Time derivative of the consensus integrators, ``L_c [I^s]^-1 I_t``."""
    return comm_laplacian @ (np.asarray(It, dtype=float) / np.asarray(ratings, dtype=float))


def omega(Omega, ratings, comm_laplacian) -> np.ndarray:
    """Consensus variable ``[I^s]^-1 L_c Omega``; never integrated on its own."""
    return (comm_laplacian @ np.asarray(Omega, dtype=float)) / np.asarray(ratings, dtype=float)


def primary_command(gains: ControllerGains, x_hat, omega_i: float) -> float:
    """Buck converter command for one DGU; ``x_hat = (V, I_t, v)``."""
    V, It, v = x_hat
    return gains.k1 * V + gains.k2 * It + gains.k3 * v + gains.k4 * omega_i
