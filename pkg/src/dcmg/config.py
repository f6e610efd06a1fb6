"""Microgrid description and its TOML config format.

A config file is one experiment: electrical network, communication network,
per-DGU parameters / gains / loads / references, scenario and solver settings.
Units are SI throughout (ohm, henry, farad, ampere, volt, siemens, watt, second).
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import tomli
import tomli_w

from dcmg.control import ControllerGains, synthesize_gains
from dcmg.errors import ConfigError, DimensionMismatch
from dcmg.events import Scenario, ScenarioEvent
from dcmg.network import CommGraph, ElectricalGraph
from dcmg.plant import DguParams, ZipLoad

BUNDLED = ("six_dgu.cfg", "collapse.cfg", "comm_failure.cfg")


@dataclass(frozen=True)
class SolverSettings:
    dt: float = 1e-5
    decimation: int = 100
    v_min: float = 1.0
    residual_tol: float = 1e-8
    settle_tol: float = 1e-6
    rank_tol: float = 1e-10
    fixed_point_tol: float = 1e-10
    max_iter: int = 10_000

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigError("dt must be > 0", field="solver.dt")
        if self.decimation < 1:
            raise ConfigError("decimation must be >= 1", field="solver.decimation")
        if self.v_min < 0:
            raise ConfigError("v_min must be >= 0", field="solver.v_min")


@dataclass(frozen=True, eq=False)
class MicrogridSpec:
    graph: ElectricalGraph
    comm: CommGraph
    dgus: tuple[DguParams, ...]
    gains: tuple[ControllerGains, ...] | None
    loads: tuple[ZipLoad, ...]
    v_ref: np.ndarray
    scenario: Scenario = field(default_factory=Scenario)
    solver: SolverSettings = field(default_factory=SolverSettings)
    name: str = "microgrid"

    def __post_init__(self):
        object.__setattr__(self, "dgus", tuple(self.dgus))
        object.__setattr__(self, "loads", tuple(self.loads))
        if self.gains is not None:
            object.__setattr__(self, "gains", tuple(self.gains))
        v_ref = np.array(self.v_ref, dtype=float).reshape(-1)
        v_ref.setflags(write=False)
        object.__setattr__(self, "v_ref", v_ref)
        N = self.graph.node_count
        if self.comm.node_count != N:
            raise DimensionMismatch(
                f"communication graph has {self.comm.node_count} nodes, electrical graph {N}",
                field="communication",
            )
        for name, seq in (("dgu", self.dgus), ("load", self.loads), ("v_ref", v_ref)):
            if len(seq) != N:
                raise DimensionMismatch(f"expected {N} entries, got {len(seq)}", field=name)
        if self.gains is not None and len(self.gains) != N:
            raise DimensionMismatch(f"expected {N} gain sets, got {len(self.gains)}", field="gains")
        if np.any(v_ref <= 0):
            raise ConfigError("voltage references must be > 0", field="dgu.v_ref")
        for ev in self.scenario.events:
            if ev.bus is not None and not 0 <= ev.bus < N:
                raise ConfigError(f"event at t={ev.time} references bus {ev.bus + 1}", field="scenario.events")
            if ev.lines is not None and any(not 0 <= l < self.M for l in ev.lines):
                raise ConfigError(f"event at t={ev.time} references a missing line", field="scenario.events")

    @property
    def N(self) -> int:
        return self.graph.node_count

    @property
    def M(self) -> int:
        return self.graph.line_count

    @property
    def Rt(self) -> np.ndarray:
        return np.array([d.Rt for d in self.dgus])

    @property
    def Lt(self) -> np.ndarray:
        return np.array([d.Lt for d in self.dgus])

    @property
    def Ct(self) -> np.ndarray:
        return np.array([d.Ct for d in self.dgus])

    @property
    def ratings(self) -> np.ndarray:
        return np.array([d.rating for d in self.dgus])

    def gain_arrays(self):
        g = np.array([k.as_tuple() for k in self.gains], dtype=float)
        return g[:, 0], g[:, 1], g[:, 2], g[:, 3]

    def load_arrays(self):
        """(Y, I, P) arrays over buses."""
        arr = np.array([(l.Y, l.I, l.P) for l in self.loads], dtype=float).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]

    def replace(self, **changes) -> "MicrogridSpec":
        return dataclasses.replace(self, **changes)

    def with_load(self, bus: int, load: ZipLoad) -> "MicrogridSpec":
        loads = list(self.loads)
        loads[bus] = load
        return self.replace(loads=tuple(loads))

    def with_reference(self, bus: int, value: float) -> "MicrogridSpec":
        v_ref = np.array(self.v_ref)
        v_ref[bus] = value
        return self.replace(v_ref=v_ref)

    def to_dict(self) -> dict:
        """Plain-data tree in the config-file layout (gains always explicit)."""
        lines = [
            {"id": l + 1, "from": a + 1, "to": b + 1, "R": float(R), "L": float(L)}
            for l, ((a, b), R, L) in enumerate(zip(self.graph.edges, self.graph.resistance, self.graph.inductance))
        ]
        links = [{"between": [i + 1, j + 1], "weight": w} for i, j, w in self.comm.edge_list()]
        dgus = []
        for i in range(self.N):
            d, ld = self.dgus[i], self.loads[i]
            entry = {
                "bus": i + 1,
                "Rt": d.Rt,
                "Lt": d.Lt,
                "Ct": d.Ct,
                "rating": d.rating,
                "v_ref": float(self.v_ref[i]),
                "load": {"Y": ld.Y, "I": ld.I, "P": ld.P},
            }
            if self.gains is not None:
                g = self.gains[i]
                entry["gains"] = {"k1": g.k1, "k2": g.k2, "k3": g.k3, "k4": g.k4}
            dgus.append(entry)
        sc = self.scenario
        events = [_event_to_dict(e) for e in sc.events]
        scenario = {
            "initial": sc.initial,
            "lines_active": sc.lines_active,
            "comm_active": sc.comm_active,
            "t_start": sc.t_start,
            "t_end": sc.t_end,
        }
        if events:
            scenario["events"] = events
        return {
            "name": self.name,
            "network": {"buses": self.N, "lines": lines},
            "communication": {"links": links},
            "dgu": dgus,
            "scenario": scenario,
            "solver": dataclasses.asdict(self.solver),
        }


def _event_to_dict(e: ScenarioEvent) -> dict:
    out = {"time": e.time, "kind": e.kind}
    if e.bus is not None:
        out["bus"] = e.bus + 1
    if e.kind == "plug_in":
        out["lines"] = "all" if e.lines is None else [l + 1 for l in e.lines]
    if e.load is not None:
        out["load"] = {"Y": e.load.Y, "I": e.load.I, "P": e.load.P}
    if e.value is not None:
        out["value"] = e.value
    return out


def _get(tree: dict, key: str, path: str, kind=None, default=...):
    if key not in tree:
        if default is ...:
            raise ConfigError("missing required field", field=f"{path}{key}")
        return default
    val = tree[key]
    if kind is float:
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"expected a number, got {val!r}", field=f"{path}{key}")
        return float(val)
    if kind is int:
        if isinstance(val, bool) or not isinstance(val, int):
            raise ConfigError(f"expected an integer, got {val!r}", field=f"{path}{key}")
        return val
    if kind is not None and not isinstance(val, kind):
        raise ConfigError(f"expected {kind.__name__}, got {val!r}", field=f"{path}{key}")
    return val


def _load(tree: dict, path: str) -> ZipLoad:
    try:
        return ZipLoad(
            _get(tree, "Y", path, float, 0.0),
            _get(tree, "I", path, float, 0.0),
            _get(tree, "P", path, float, 0.0),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), field=path.rstrip(".")) from None


def spec_from_dict(tree: dict) -> MicrogridSpec:
    net = _get(tree, "network", "", dict)
    N = _get(net, "buses", "network.", int)
    raw_lines = _get(net, "lines", "network.", list)
    edges, R, L = [], [], []
    for k, line in enumerate(raw_lines):
        p = f"network.lines[{k}]."
        lid = _get(line, "id", p, int, k + 1)
        if lid != k + 1:
            raise ConfigError(f"line ids must run 1..M in order; found {lid} at position {k + 1}", field=p + "id")
        edges.append((_get(line, "from", p, int) - 1, _get(line, "to", p, int) - 1))
        R.append(_get(line, "R", p, float))
        L.append(_get(line, "L", p, float))
    graph = ElectricalGraph(N, tuple(edges), np.array(R), np.array(L))

    comm_tree = _get(tree, "communication", "", dict)
    W = np.zeros((N, N))
    for k, link in enumerate(_get(comm_tree, "links", "communication.", list)):
        p = f"communication.links[{k}]."
        pair = _get(link, "between", p, list)
        if len(pair) != 2 or not all(isinstance(b, int) and 1 <= b <= N for b in pair):
            raise ConfigError(f"'between' must name two buses in 1..{N}", field=p + "between")
        i, j = pair[0] - 1, pair[1] - 1
        if i == j:
            raise ConfigError("self-link", field=p + "between")
        W[i, j] = W[j, i] = _get(link, "weight", p, float, 1.0)
    comm = CommGraph(W)

    synth = tree.get("gain_synthesis", {})
    margins = tuple(synth.get("margins", (0.5, 0.5, 0.5)))
    scales = synth.get("scales")

    raw_dgus = _get(tree, "dgu", "", list)
    if len(raw_dgus) != N:
        raise DimensionMismatch(f"expected {N} [[dgu]] entries, got {len(raw_dgus)}", field="dgu")
    by_bus = {}
    for k, d in enumerate(raw_dgus):
        bus = _get(d, "bus", f"dgu[{k}].", int, k + 1)
        if not 1 <= bus <= N or bus in by_bus:
            raise ConfigError(f"bus {bus} invalid or repeated", field=f"dgu[{k}].bus")
        by_bus[bus] = (k, d)
    dgus, gains, loads, v_ref = [], [], [], []
    for bus in range(1, N + 1):
        k, d = by_bus[bus]
        p = f"dgu[{k}]."
        values = {}
        for name in ("Rt", "Lt", "Ct", "rating"):
            values[name] = _get(d, name, p, float)
            if not values[name] > 0:
                raise ConfigError(f"must be > 0, got {values[name]:g}", field=p + name)
        params = DguParams(**values)
        dgus.append(params)
        v_ref.append(_get(d, "v_ref", p, float))
        loads.append(_load(_get(d, "load", p, dict, {}), p + "load."))
        g = d.get("gains", "synthesize")
        if g == "synthesize":
            gains.append(synthesize_gains(params, margins, scales))
        elif isinstance(g, dict):
            gp = p + "gains."
            k1 = _get(g, "k1", gp, float)
            gains.append(
                ControllerGains(k1, _get(g, "k2", gp, float), _get(g, "k3", gp, float), _get(g, "k4", gp, float, k1))
            )
        else:
            raise ConfigError("gains must be a table {k1, k2, k3, k4} or \"synthesize\"", field=p + "gains")

    sc = tree.get("scenario", {})
    events = []
    for k, e in enumerate(sc.get("events", [])):
        p = f"scenario.events[{k}]."
        kind = _get(e, "kind", p, str)
        bus = e.get("bus")
        if bus is not None:
            bus = _get(e, "bus", p, int) - 1
        lines = None
        if kind == "plug_in":
            raw = e.get("lines", "all")
            if raw != "all":
                if not isinstance(raw, list):
                    raise ConfigError("lines must be \"all\" or a list of line ids", field=p + "lines")
                lines = tuple(int(l) - 1 for l in raw)
        load = _load(e["load"], p + "load.") if "load" in e else None
        value = _get(e, "value", p, float, None)
        try:
            events.append(ScenarioEvent(_get(e, "time", p, float), kind, bus, lines, load, value))
        except ValueError as exc:
            raise ConfigError(str(exc), field=p.rstrip(".")) from None
    try:
        scenario = Scenario(
            initial=sc.get("initial", "isolated_primary"),
            lines_active=bool(sc.get("lines_active", True)),
            comm_active=bool(sc.get("comm_active", True)),
            t_start=float(sc.get("t_start", 0.0)),
            t_end=float(sc.get("t_end", 1.0)),
            events=tuple(events),
        )
    except ValueError as exc:
        raise ConfigError(str(exc), field="scenario") from None

    solver_tree = tree.get("solver", {})
    known = {f.name: f.type for f in dataclasses.fields(SolverSettings)}
    unknown = set(solver_tree) - set(known)
    if unknown:
        raise ConfigError(f"unknown solver settings {sorted(unknown)}", field="solver")
    solver = SolverSettings(**solver_tree)

    return MicrogridSpec(
        graph=graph,
        comm=comm,
        dgus=tuple(dgus),
        gains=tuple(gains),
        loads=tuple(loads),
        v_ref=np.array(v_ref),
        scenario=scenario,
        solver=solver,
        name=str(tree.get("name", "microgrid")),
    )


def locate_field(text: str, field_path: str) -> int | None:
    """Best-effort 1-based line of a dotted field path such as ``dgu[2].Rt`` or
    ``network.lines[3].R``; None when it cannot be pinned down."""
    pos = 0
    for seg in field_path.split("."):
        m = re.fullmatch(r"(\w+)(?:\[(\d+)\])?", seg)
        if m is None:
            return None
        name, idx = m.group(1), m.group(2)
        header = re.compile(rf"^[ \t]*\[\[?[ \t]*(?:[\w.]+\.)?{name}[ \t]*\]\]?[ \t]*$", re.M)
        key = re.compile(rf"(?:^|[{{,\s])(?P<key>{name})\s*=", re.M)
        heads = [h for h in header.finditer(text) if h.start() >= pos]
        if heads and heads[0].group(0).strip().startswith("[["):
            k = int(idx or 0)
            if k >= len(heads):
                return None
            pos = heads[k].start()
            continue
        if heads:
            pos = heads[0].start()
            continue
        hit = key.search(text, pos)
        if hit is None:
            return None
        pos = hit.start("key")
        if idx is not None:
            # k-th top-level inline table of the array value
            opened, depth = [], 0
            for j in range(hit.end(), len(text)):
                ch = text[j]
                if ch == "{":
                    if depth == 0:
                        opened.append(j)
                    depth += 1
                elif ch == "}":
                    depth -= 1
                elif ch == "]" and depth == 0:
                    break
            if int(idx) >= len(opened):
                return None
            pos = opened[int(idx)]
    return text.count("\n", 0, pos) + 1


def parse_spec(text: str) -> MicrogridSpec:
    try:
        tree = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc.msg}", line=getattr(exc, "lineno", None)) from None
    try:
        return spec_from_dict(tree)
    except ConfigError as exc:
        if exc.line is None and exc.field:
            exc.line = locate_field(text, exc.field)
        raise


def load_spec(path) -> MicrogridSpec:
    path = Path(path)
    if not path.exists():
        bundled = bundled_config(path.name)
        if bundled is None:
            raise ConfigError(f"config file not found: {path}")
        path = bundled
    return parse_spec(path.read_text())


def emit_spec(spec: MicrogridSpec) -> str:
    return tomli_w.dumps(spec.to_dict())


def dump_spec(spec: MicrogridSpec, path) -> None:
    Path(path).write_text(emit_spec(spec))


def bundled_config(name: str) -> Path | None:
    """Path of a config shipped with the package, or None."""
    ref = resources.files("dcmg") / "configs" / name
    return Path(str(ref)) if ref.is_file() else None
