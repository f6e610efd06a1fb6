"""Islanded DC microgrid analysis: primary PI voltage control, consensus-based
secondary current sharing, ZIP-load equilibria and time-domain simulation."""

from dcmg.config import MicrogridSpec, load_spec, dump_spec, bundled_config
from dcmg.network import ElectricalGraph, CommGraph
from dcmg.plant import DguParams, ZipLoad, GlobalState, assemble_system, full_rhs
from dcmg.control import ControllerGains, validate_gains, synthesize_gains
from dcmg.equilibrium import (
    build_flow_system,
    nominal_voltage,
    certificate,
    solve_voltage,
    complete_equilibrium,
    linearized_stability,
    solve_equilibrium,
)
from dcmg.simulate import integrate, compute_metrics, steady_state_of

__version__ = "0.1.0"

__all__ = [
    "MicrogridSpec",
    "load_spec",
    "dump_spec",
    "bundled_config",
    "ElectricalGraph",
    "CommGraph",
    "DguParams",
    "ZipLoad",
    "GlobalState",
    "assemble_system",
    "full_rhs",
    "ControllerGains",
    "validate_gains",
    "synthesize_gains",
    "build_flow_system",
    "nominal_voltage",
    "certificate",
    "solve_voltage",
    "complete_equilibrium",
    "linearized_stability",
    "solve_equilibrium",
    "integrate",
    "compute_metrics",
    "steady_state_of",
]
