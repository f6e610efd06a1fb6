"""Scenario events and the scenario description carried by a microgrid config."""

from __future__ import annotations

from dataclasses import dataclass

EVENT_KINDS = ("plug_in", "load_step", "comm_collapse", "comm_restore", "set_reference")
INITIAL_MODES = ("isolated_primary", "equilibrium")


@dataclass(frozen=True)
class ScenarioEvent:
    """One timed change to the microgrid.

    kind          payload
    plug_in       ``lines``: tuple of 0-based line indices, or None for all lines
    load_step     ``bus`` and ``load`` (a ZipLoad replacing the bus load)
    comm_collapse none; secondary layer switched off, Omega frozen
    comm_restore  none
    set_reference ``bus`` and ``value`` (new V_ref in volt)
    """

    time: float
    kind: str
    bus: int | None = None
    lines: tuple[int, ...] | None = None
    load: object | None = None
    value: float | None = None

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}; expected one of {EVENT_KINDS}")
        if self.kind in ("load_step", "set_reference") and self.bus is None:
            raise ValueError(f"{self.kind} event needs a bus")
        if self.kind == "load_step" and self.load is None:
            raise ValueError("load_step event needs a load")
        if self.kind == "set_reference" and self.value is None:
            raise ValueError("set_reference event needs a value")
        if self.lines is not None:
            object.__setattr__(self, "lines", tuple(int(l) for l in self.lines))


@dataclass(frozen=True)
class Scenario:
    """Initial condition and event list of a time-domain run.

    ``initial`` selects the starting state: ``isolated_primary`` puts every DGU
    at its own primary-control steady state (V = V_ref, no line current) and
    ``equilibrium`` starts at the solved secondary-control equilibrium.
    """

    initial: str = "isolated_primary"
    lines_active: bool = True
    comm_active: bool = True
    t_start: float = 0.0
    t_end: float = 1.0
    events: tuple[ScenarioEvent, ...] = ()

    def __post_init__(self):
        if self.initial not in INITIAL_MODES:
            raise ValueError(f"unknown initial mode {self.initial!r}; expected one of {INITIAL_MODES}")
        if self.t_end <= self.t_start:
            raise ValueError("t_end must exceed t_start")
        times = [e.time for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("scenario events must be sorted by time")
        if times and (times[0] < self.t_start or times[-1] > self.t_end):
            raise ValueError("scenario events must lie inside [t_start, t_end]")
        object.__setattr__(self, "events", tuple(self.events))
