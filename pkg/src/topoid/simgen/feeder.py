"""Feeder description, validation and topology enumeration."""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import networkx as nx

from ..errors import FeederSpecError, NoValidTopology
from ..model import TopologyLabel

FORMAT_VERSION = 1
PHASES = "abc"
LOAD_TYPES = ("constant-power", "constant-current", "constant-impedance")
# voltage exponent of each load type: P = P0 * (V / V0) ** exponent
LOAD_EXPONENT = {"constant-power": 0, "constant-current": 1, "constant-impedance": 2}
SOURCE = "__source__"


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    phases: str
    r: tuple[float, ...]
    x: tuple[float, ...]
    switch_id: str | None = None
    normally_closed: bool = True

    @property
    def switchable(self) -> bool:
        return self.switch_id is not None

    def impedance(self, phase: str) -> complex:
        i = self.phases.index(phase)
        return complex(self.r[i], self.x[i])


@dataclass(frozen=True)
class ProtectiveDevice:
    id: str
    branch: str


@dataclass(frozen=True)
class Load:
    """One load object with a single random multiplier; may span several
    phases of its bus with per-phase base powers."""

    bus: str
    phases: str
    p: tuple[float, ...]
    q: tuple[float, ...]
    type: str = "constant-power"

    def elements(self):
        """(phase, p, q) per connected phase."""
        return list(zip(self.phases, self.p, self.q))


@dataclass(frozen=True)
class Der:
    id: str
    bus: str
    p_mean: float
    power_factor: float = 0.95
    metered: bool = True


@dataclass(frozen=True)
class FeederModel:
    name: str
    buses: dict[str, str]  # bus id -> phases
    branches: tuple[Branch, ...]
    protective_devices: tuple[ProtectiveDevice, ...]
    loads: tuple[Load, ...]
    ders: tuple[Der, ...]
    substation_bus: str
    source_r: float
    source_x: float
    v0: float = 1.0
    max_loops: int = 1
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    # ---- derived views -----------------------------------------------------

    @property
    def switches(self) -> list[Branch]:
        return [b for b in self.branches if b.switchable]

    @property
    def metered_units(self) -> list[str]:
        return ["SUB"] + [d.id for d in self.ders if d.metered]

    def predictor_names(self) -> tuple[str, ...]:
        names = [f"SUB.{q}" for q in ("P", "Q", "V+", "V-")]
        for d in self.ders:
            if d.metered:
                names += [f"{d.id}.{q}" for q in ("P", "V+", "V-")]
        return tuple(names)

    def branch(self, branch_id: str) -> Branch:
        for b in self.branches:
            if b.id == branch_id:
                return b
        raise FeederSpecError(f"unknown branch {branch_id!r}")

    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    # ---- variants ----------------------------------------------------------

    def with_load_type(self, load_type: str) -> "FeederModel":
        if load_type not in LOAD_TYPES:
            raise FeederSpecError(f"unknown load type {load_type!r}")
        return replace(self, loads=tuple(replace(l, type=load_type) for l in self.loads))

    def scaled_loads(self, p: float = 1.0, q: float = 1.0) -> "FeederModel":
        return replace(self, loads=tuple(
            replace(l, p=tuple(v * p for v in l.p), q=tuple(v * q for v in l.q)) for l in self.loads))

    def balanced(self) -> "FeederModel":
        """Variant where every bus carries the same load on each of its phases."""
        loads = []
        for l in self.loads:
            phases = self.buses[l.bus]
            p, q = sum(l.p) / len(phases), sum(l.q) / len(phases)
            loads.append(Load(l.bus, phases, (p,) * len(phases), (q,) * len(phases), "constant-power"))
        branches = tuple(
            replace(b, r=(sum(b.r) / len(b.r),) * len(b.phases), x=(sum(b.x) / len(b.x),) * len(b.phases))
            for b in self.branches
        )
        return replace(self, loads=tuple(loads), branches=branches)

    # ---- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "name": self.name,
            "v0": self.v0,
            "max_loops": self.max_loops,
            "substation": {"bus": self.substation_bus, "r": self.source_r, "x": self.source_x},
            "buses": [{"id": b, "phases": ph} for b, ph in self.buses.items()],
            "branches": [
                {"id": b.id, "from": b.from_bus, "to": b.to_bus, "phases": b.phases,
                 "r": list(b.r), "x": list(b.x), "switch_id": b.switch_id,
                 "normally_closed": b.normally_closed}
                for b in self.branches
            ],
            "protective_devices": [{"id": d.id, "branch": d.branch} for d in self.protective_devices],
            "loads": [{"bus": l.bus, "phase": l.phases, "p": list(l.p), "q": list(l.q), "type": l.type}
                      for l in self.loads],
            "ders": [{"id": d.id, "bus": d.bus, "p_mean": d.p_mean, "power_factor": d.power_factor,
                      "metered": d.metered} for d in self.ders],
        }


def _num(value, what):
    try:
        out = float(value)
    except (TypeError, ValueError):
        raise FeederSpecError(f"{what}: expected a number, got {value!r}") from None
    if out != out or out in (float("inf"), float("-inf")):
        raise FeederSpecError(f"{what}: must be finite")
    return out


def _per_phase(value, phases, what):
    vals = value if isinstance(value, (list, tuple)) else [value] * len(phases)
    if len(vals) != len(phases):
        raise FeederSpecError(f"{what}: expected {len(phases)} per-phase values")
    return tuple(_num(v, what) for v in vals)


def parse_feeder(spec: dict) -> FeederModel:
    """Validate a feeder document and build the model.

    Every error message names the offending element.
    """
    if not isinstance(spec, dict):
        raise FeederSpecError("feeder spec must be a JSON object")
    if spec.get("format_version") != FORMAT_VERSION:
        raise FeederSpecError(f"format_version: unsupported value {spec.get('format_version')!r}")
    try:
        buses = {}
        for b in spec["buses"]:
            bid, ph = str(b["id"]), b.get("phases", "abc")
            if bid in buses:
                raise FeederSpecError(f"bus {bid}: duplicate id")
            if not ph or any(c not in PHASES for c in ph) or len(set(ph)) != len(ph):
                raise FeederSpecError(f"bus {bid}: invalid phases {ph!r}")
            buses[bid] = "".join(c for c in PHASES if c in ph)

        branches = []
        for b in spec["branches"]:
            bid = str(b["id"])
            fr, to = str(b["from"]), str(b["to"])
            for end in (fr, to):
                if end not in buses:
                    raise FeederSpecError(f"branch {bid}: unknown bus {end!r}")
            ph = "".join(c for c in PHASES if c in b.get("phases", "abc"))
            if not ph or any(c not in buses[fr] or c not in buses[to] for c in ph):
                raise FeederSpecError(f"branch {bid}: phases {b.get('phases')!r} not present at both ends")
            r = _per_phase(b["r"], ph, f"branch {bid} r")
            x = _per_phase(b["x"], ph, f"branch {bid} x")
            for ri, xi in zip(r, x):
                if ri < 0 or xi < 0:
                    raise FeederSpecError(f"branch {bid}: negative impedance (r={ri}, x={xi})")
                if ri == 0 and xi == 0:
                    raise FeederSpecError(f"branch {bid}: zero impedance")
            sw = b.get("switch_id")
            branches.append(Branch(bid, fr, to, ph, r, x, None if sw is None else str(sw),
                                   bool(b.get("normally_closed", True))))
        ids = [b.id for b in branches]
        if len(set(ids)) != len(ids):
            raise FeederSpecError("branches: duplicate branch id")
        switch_ids = [b.switch_id for b in branches if b.switchable]
        if len(set(switch_ids)) != len(switch_ids):
            raise FeederSpecError("branches: duplicate switch_id")

        pds = []
        for d in spec.get("protective_devices", []):
            did, br = str(d["id"]), str(d["branch"])
            if br not in ids:
                raise FeederSpecError(f"protective device {did}: unknown branch {br!r}")
            pds.append(ProtectiveDevice(did, br))

        loads = []
        for i, l in enumerate(spec.get("loads", [])):
            bus, ph = str(l["bus"]), l.get("phase", l.get("phases"))
            if bus not in buses or not ph or any(c not in buses[bus] for c in ph) or len(set(ph)) != len(ph):
                raise FeederSpecError(f"load {i}: bus {bus!r} has no phase(s) {ph!r}")
            typ = l.get("type", "constant-power")
            if typ not in LOAD_TYPES:
                raise FeederSpecError(f"load {i}: unknown type {typ!r}")
            p = _per_phase(l["p"], ph, f"load {i} p")
            q = _per_phase(l["q"], ph, f"load {i} q")
            if any(v < 0 for v in p):
                raise FeederSpecError(f"load {i}: negative active power")
            loads.append(Load(bus, ph, p, q, typ))

        ders = []
        for d in spec.get("ders", []):
            did, bus = str(d["id"]), str(d["bus"])
            if bus not in buses or buses[bus] != PHASES:
                raise FeederSpecError(f"DER {did}: bus {bus!r} must exist and be three-phase")
            if did == "SUB" or "." in did:
                raise FeederSpecError(f"DER {did}: reserved or invalid id")
            pf = _num(d.get("power_factor", 0.95), f"DER {did} power_factor")
            if not 0 < pf <= 1:
                raise FeederSpecError(f"DER {did}: power_factor must lie in (0, 1]")
            p_mean = _num(d["p_mean"], f"DER {did} p_mean")
            if p_mean < 0:
                raise FeederSpecError(f"DER {did}: negative p_mean")
            ders.append(Der(did, bus, p_mean, pf, bool(d.get("metered", True))))
        if len({d.id for d in ders}) != len(ders):
            raise FeederSpecError("ders: duplicate id")

        sub = spec["substation"]
        sub_bus = str(sub["bus"])
        if sub_bus not in buses or buses[sub_bus] != PHASES:
            raise FeederSpecError(f"substation: bus {sub_bus!r} must exist and be three-phase")
        sr, sx = _num(sub.get("r", 0.0), "substation r"), _num(sub.get("x", 0.0), "substation x")
        if sr < 0 or sx < 0:
            raise FeederSpecError("substation: source impedance must be non-negative")
    except KeyError as exc:
        raise FeederSpecError(f"missing required field {exc.args[0]!r}") from None

    feeder = FeederModel(
        name=str(spec.get("name", "feeder")),
        buses=buses,
        branches=tuple(branches),
        protective_devices=tuple(pds),
        loads=tuple(loads),
        ders=tuple(ders),
        substation_bus=sub_bus,
        source_r=sr,
        source_x=sx,
        v0=_num(spec.get("v0", 1.0), "v0"),
        max_loops=int(spec.get("max_loops", 1)),
        raw=copy.deepcopy(spec),
    )
    return feeder


def load_feeder(path) -> FeederModel:
    with open(path) as fh:
        try:
            spec = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FeederSpecError(f"{path}: not valid JSON ({exc})") from None
    return parse_feeder(spec)


def reference_feeder_path() -> Path:
    return Path(str(resources.files("topoid") / "data" / "reference_feeder.json"))


def reference_feeder() -> FeederModel:
    return load_feeder(reference_feeder_path())


# ---- topology ----------------------------------------------------------------


@dataclass(frozen=True)
class SwitchConfiguration:
    id: str
    closed: frozenset[str]  # switch ids that are closed
    loops: int


def in_service(feeder: FeederModel, closed_switches, open_pds=()) -> list[Branch]:
    pd_branches = {d.branch for d in feeder.protective_devices if d.id in set(open_pds)}
    out = []
    for b in feeder.branches:
        if b.switchable and b.switch_id not in closed_switches:
            continue
        if b.id in pd_branches:
            continue
        out.append(b)
    return out


def energized(feeder: FeederModel, branches, phase: str) -> set[str]:
    g = nx.Graph()
    g.add_nodes_from(b for b, ph in feeder.buses.items() if phase in ph)
    g.add_edges_from((b.from_bus, b.to_bus) for b in branches if phase in b.phases)
    return nx.node_connected_component(g, feeder.substation_bus)


def _loop_count(feeder: FeederModel, branches) -> int:
    g = nx.MultiGraph()
    g.add_nodes_from(feeder.buses)
    g.add_edges_from((b.from_bus, b.to_bus) for b in branches)
    return g.number_of_edges() - g.number_of_nodes() + nx.number_connected_components(g)


def _supplied(feeder: FeederModel, branches) -> bool:
    live = {ph: energized(feeder, branches, ph) for ph in PHASES}
    if any(l.bus not in live[ph] for l in feeder.loads for ph in l.phases):
        return False
    return all(d.bus in live[ph] for d in feeder.ders for ph in PHASES)


def switch_configurations(feeder: FeederModel) -> list[SwitchConfiguration]:
    """Switch states that keep every load and DER supplied with at most
    ``max_loops`` independent loops, ordered by distance from the normal state."""
    switches = feeder.switches
    normal = tuple(s.normally_closed for s in switches)
    states = list(itertools.product((True, False), repeat=len(switches)))
    def deviation(st):
        flags = tuple(int(a != b) for a, b in zip(st, normal))
        return sum(flags), flags

    states.sort(key=deviation)
    configs = []
    for st in states:
        closed = frozenset(s.switch_id for s, c in zip(switches, st) if c)
        branches = in_service(feeder, closed)
        if not _supplied(feeder, branches):
            continue
        loops = _loop_count(feeder, branches)
        if loops > feeder.max_loops:
            continue
        configs.append(SwitchConfiguration(f"C{len(configs) + 1}", closed, loops))
    return configs


def enumerate_topologies(feeder: FeederModel) -> list[TopologyLabel]:
    """Every admissible switch configuration crossed with every PD status vector."""
    configs = switch_configurations(feeder)
    if not configs:
        raise NoValidTopology(f"feeder {feeder.name}: no switch configuration supplies every load")
    m = len(feeder.protective_devices)
    labels = []
    for cfg in configs:
        for bits in itertools.product((0, 1), repeat=m):
            opened = [d.id for d, b in zip(feeder.protective_devices, bits) if b]
            branches = in_service(feeder, cfg.closed, opened)
            for d in feeder.ders:
                for ph in PHASES:
                    if d.bus not in energized(feeder, branches, ph):
                        raise FeederSpecError(
                            f"DER {d.id} is de-energized when {', '.join(opened)} open(s) in {cfg.id}"
                        )
            labels.append(TopologyLabel(cfg.id, bits))
    return labels


def configuration(feeder: FeederModel, config_id: str) -> SwitchConfiguration:
    for cfg in switch_configurations(feeder):
        if cfg.id == config_id:
            return cfg
    raise NoValidTopology(f"unknown switch configuration {config_id!r}")
