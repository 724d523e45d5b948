"""Feeder data model, topology validation and the on-disk network format.

A network is a radial multi-phase feeder graph: buses carry loads and the
controllable devices (DG, SVC, capacitor bank), branches carry per-phase
impedances and optionally a voltage regulator.  All electrical quantities
are stored per-unit on the declared power/voltage bases; the JSON file
format is documented in the README.

Instances are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

PHASES = ("a", "b", "c")

BusId = int | str

# Default flow bounds when the file omits them; wide enough to be inactive
# for any sane per-unit feeder.
DEFAULT_FLOW_BOUND = 10.0


class ParseError(ValueError):
    """Network file violates the schema; message carries the field path."""


class TopologyError(ValueError):
    """Branch graph is not a tree rooted at the PCC."""


class ConfigError(ValueError):
    """Structurally valid input with inconsistent configuration."""


class InputError(ValueError):
    """A scenario or solution is missing required entries."""


@dataclass(frozen=True)
class DeviceVR:
    """Voltage regulator: ordered list of allowed turn ratios."""

    taps: tuple[float, ...]

    def __post_init__(self):
        if len(self.taps) < 2:
            raise ConfigError("voltage regulator needs at least 2 taps")
        if any(t <= 0 for t in self.taps):
            raise ConfigError("voltage regulator taps must be positive")
        if any(b <= a for a, b in zip(self.taps, self.taps[1:])):
            raise ConfigError("voltage regulator taps must be strictly increasing")


@dataclass(frozen=True)
class DeviceMSC:
    """Switched capacitor bank with per-unit susceptance b_c."""

    b_c: float

    def __post_init__(self):
        if self.b_c <= 0:
            raise ConfigError("capacitor bank susceptance must be positive")


@dataclass(frozen=True)
class DeviceDG:
    """Distributed generator: forecast active output plus reactive range."""

    p_forecast: Mapping[str, float]
    q_min: float
    q_max: float

    def __post_init__(self):
        if self.q_min > self.q_max:
            raise ConfigError("DG reactive limits must satisfy q_min <= q_max")


@dataclass(frozen=True)
class DeviceSVC:
    """Static VAR compensator: continuously controllable reactive range."""

    q_min: float
    q_max: float

    def __post_init__(self):
        if self.q_min > self.q_max:
            raise ConfigError("SVC reactive limits must satisfy q_min <= q_max")


@dataclass(frozen=True)
class Bus:
    id: BusId
    phases: tuple[str, ...]
    load_p: Mapping[str, float]
    load_q: Mapping[str, float]
    v_min: float
    v_max: float
    dg: DeviceDG | None = None
    svc: DeviceSVC | None = None
    msc: DeviceMSC | None = None

    def __post_init__(self):
        if not (0 < self.v_min < self.v_max):
            raise ConfigError(f"bus {self.id}: need 0 < v_min < v_max")
        for ph in list(self.load_p) + list(self.load_q):
            if ph not in self.phases:
                raise ConfigError(f"bus {self.id}: load on absent phase {ph!r}")
        if self.dg is not None:
            for ph in self.dg.p_forecast:
                if ph not in self.phases:
                    raise ConfigError(f"bus {self.id}: DG on absent phase {ph!r}")


@dataclass(frozen=True)
class Branch:
    """Directed feeder segment; `from` is the PCC side after validation."""

    from_bus: BusId
    to_bus: BusId
    r: Mapping[str, float]
    x: Mapping[str, float]
    i_max: float
    p_min: float = -DEFAULT_FLOW_BOUND
    p_max: float = DEFAULT_FLOW_BOUND
    q_min: float = -DEFAULT_FLOW_BOUND
    q_max: float = DEFAULT_FLOW_BOUND
    vr: DeviceVR | None = None

    def __post_init__(self):
        if set(self.r) != set(self.x):
            raise ConfigError(
                f"branch {self.from_bus}->{self.to_bus}: r and x phase sets differ"
            )
        if not self.r:
            raise ConfigError(f"branch {self.from_bus}->{self.to_bus}: carries no phase")
        if any(v < 0 for v in self.r.values()):
            raise ConfigError(f"branch {self.from_bus}->{self.to_bus}: negative resistance")
        if self.i_max <= 0:
            raise ConfigError(f"branch {self.from_bus}->{self.to_bus}: i_max must be positive")
        if self.p_min > self.p_max or self.q_min > self.q_max:
            raise ConfigError(f"branch {self.from_bus}->{self.to_bus}: empty flow bounds")

    @property
    def phases(self) -> tuple[str, ...]:
        return tuple(ph for ph in PHASES if ph in self.r)

    @property
    def key(self) -> tuple[BusId, BusId]:
        return (self.from_bus, self.to_bus)


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    pcc_bus: BusId
    phases: tuple[str, ...]
    base_power: float
    base_voltage: float
    v_ref: float
    _by_id: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        by_id = {b.id: b for b in self.buses}
        if len(by_id) != len(self.buses):
            raise ConfigError("duplicate bus ids")
        if self.pcc_bus not in by_id:
            raise ConfigError(f"PCC bus {self.pcc_bus!r} not among buses")
        object.__setattr__(self, "_by_id", by_id)

    def bus(self, bus_id: BusId) -> Bus:
        return self._by_id[bus_id]

    @property
    def bus_ids(self) -> list[BusId]:
        return [b.id for b in self.buses]

    # physical-unit accessors; the model itself stays per-unit
    def power_to_watts(self, pu: float) -> float:
        return pu * self.base_power

    def power_to_pu(self, watts: float) -> float:
        return watts / self.base_power

    def voltage_to_volts(self, pu: float) -> float:
        return pu * self.base_voltage

    def voltage_to_pu(self, volts: float) -> float:
        return volts / self.base_voltage

    def to_dict(self) -> dict:
        """Inverse of `parse_network`; serializes to the JSON schema."""
        out = {
            "base_power_va": self.base_power,
            "base_voltage_v": self.base_voltage,
            "v_ref_pu": self.v_ref,
            "pcc_bus": self.pcc_bus,
            "phases": list(self.phases),
            "buses": [],
            "branches": [],
        }
        for b in self.buses:
            entry: dict = {
                "id": b.id,
                "phases": list(b.phases),
                "v_min_pu": b.v_min,
                "v_max_pu": b.v_max,
            }
            if b.load_p:
                entry["load_p_pu"] = dict(b.load_p)
            if b.load_q:
                entry["load_q_pu"] = dict(b.load_q)
            if b.dg is not None:
                entry["dg"] = {
                    "p_pu": dict(b.dg.p_forecast),
                    "q_min_pu": b.dg.q_min,
                    "q_max_pu": b.dg.q_max,
                }
            if b.svc is not None:
                entry["svc"] = {"q_min_pu": b.svc.q_min, "q_max_pu": b.svc.q_max}
            if b.msc is not None:
                entry["msc"] = {"b_pu": b.msc.b_c}
            out["buses"].append(entry)
        for br in self.branches:
            entry = {
                "from": br.from_bus,
                "to": br.to_bus,
                "r_pu": dict(br.r),
                "x_pu": dict(br.x),
                "i_max_pu": br.i_max,
            }
            if (br.p_min, br.p_max) != (-DEFAULT_FLOW_BOUND, DEFAULT_FLOW_BOUND):
                entry["p_min_pu"] = br.p_min
                entry["p_max_pu"] = br.p_max
            if (br.q_min, br.q_max) != (-DEFAULT_FLOW_BOUND, DEFAULT_FLOW_BOUND):
                entry["q_min_pu"] = br.q_min
                entry["q_max_pu"] = br.q_max
            if br.vr is not None:
                entry["vr"] = {"taps": list(br.vr.taps)}
            out["branches"].append(entry)
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# scenarios: realized (P_D, Q_D, P_G) values keyed by bus-phase
# ---------------------------------------------------------------------------

P_LOAD = "p_load"
Q_LOAD = "q_load"
P_GEN = "p_gen"

ComponentKey = tuple[str, BusId, str]  # (kind, bus id, phase)


@dataclass(frozen=True)
class Scenario:
    """One realization of loads and DG active outputs.

    `values` maps (kind, bus, phase) to a per-unit quantity, with kind one
    of `p_load`, `q_load`, `p_gen`.
    """

    values: Mapping[ComponentKey, float]
    label: str = ""

    def get(self, kind: str, bus: BusId, phase: str) -> float:
        key = (kind, bus, phase)
        if key not in self.values:
            raise InputError(f"scenario {self.label!r} missing {kind} at bus {bus} phase {phase}")
        return self.values[key]

    def scaled(self, load_mult: float, gen_mult: float, label: str = "") -> "Scenario":
        vals = {}
        for (kind, bus, ph), val in self.values.items():
            m = gen_mult if kind == P_GEN else load_mult
            vals[(kind, bus, ph)] = m * val
        return Scenario(vals, label or self.label)


def forecast_scenario(net: Network, label: str = "forecast") -> Scenario:
    """Scenario holding the declared load and DG forecasts."""
    vals: dict[ComponentKey, float] = {}
    for bus in net.buses:
        for ph, v in bus.load_p.items():
            vals[(P_LOAD, bus.id, ph)] = v
        for ph, v in bus.load_q.items():
            vals[(Q_LOAD, bus.id, ph)] = v
        if bus.dg is not None:
            for ph, v in bus.dg.p_forecast.items():
                vals[(P_GEN, bus.id, ph)] = v
    return Scenario(vals, label)


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


def _need(obj: Mapping, key: str, where: str):
    if key not in obj:
        raise ParseError(f"{where}: missing required field {key!r}")
    return obj[key]


def _num(obj: Mapping, key: str, where: str) -> float:
    val = _need(obj, key, where)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ParseError(f"{where}.{key}: expected a number, got {type(val).__name__}")
    return float(val)


def _opt_num(obj: Mapping, key: str, where: str, default: float) -> float:
    if key not in obj:
        return default
    return _num(obj, key, where)


def _phase_map(obj, where: str, allowed: Iterable[str]) -> dict[str, float]:
    if not isinstance(obj, Mapping):
        raise ParseError(f"{where}: expected a phase->value mapping")
    out = {}
    for ph, val in obj.items():
        if ph not in PHASES:
            raise ParseError(f"{where}.{ph}: unknown phase (use a/b/c)")
        if ph not in allowed:
            raise ParseError(f"{where}.{ph}: phase not present at this element")
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ParseError(f"{where}.{ph}: expected a number")
        out[ph] = float(val)
    return out


def _parse_bus(entry, where: str, net_phases: tuple[str, ...]) -> Bus:
    if not isinstance(entry, Mapping):
        raise ParseError(f"{where}: expected an object")
    bus_id = _need(entry, "id", where)
    if not isinstance(bus_id, (int, str)):
        raise ParseError(f"{where}.id: expected an integer or string")
    raw_phases = _need(entry, "phases", where)
    if not isinstance(raw_phases, list) or not raw_phases:
        raise ParseError(f"{where}.phases: expected a non-empty list")
    for ph in raw_phases:
        if ph not in net_phases:
            raise ParseError(f"{where}.phases: phase {ph!r} not declared at network level")
    phases = tuple(ph for ph in PHASES if ph in raw_phases)

    load_p = _phase_map(entry.get("load_p_pu", {}), f"{where}.load_p_pu", phases)
    load_q = _phase_map(entry.get("load_q_pu", {}), f"{where}.load_q_pu", phases)
    v_min = _num(entry, "v_min_pu", where)
    v_max = _num(entry, "v_max_pu", where)

    dg = svc = msc = None
    if "dg" in entry:
        d = entry["dg"]
        dg = DeviceDG(
            p_forecast=_phase_map(_need(d, "p_pu", f"{where}.dg"), f"{where}.dg.p_pu", phases),
            q_min=_num(d, "q_min_pu", f"{where}.dg"),
            q_max=_num(d, "q_max_pu", f"{where}.dg"),
        )
    if "svc" in entry:
        s = entry["svc"]
        svc = DeviceSVC(q_min=_num(s, "q_min_pu", f"{where}.svc"), q_max=_num(s, "q_max_pu", f"{where}.svc"))
    if "msc" in entry:
        msc = DeviceMSC(b_c=_num(entry["msc"], "b_pu", f"{where}.msc"))

    try:
        return Bus(bus_id, phases, load_p, load_q, v_min, v_max, dg=dg, svc=svc, msc=msc)
    except ConfigError as exc:
        raise ParseError(f"{where}: {exc}") from exc


def _parse_branch(entry, where: str, buses: dict[BusId, Bus]) -> Branch:
    if not isinstance(entry, Mapping):
        raise ParseError(f"{where}: expected an object")
    from_bus = _need(entry, "from", where)
    to_bus = _need(entry, "to", where)
    for end, key in ((from_bus, "from"), (to_bus, "to")):
        if end not in buses:
            raise ParseError(f"{where}.{key}: unknown bus {end!r}")
    if from_bus == to_bus:
        raise ParseError(f"{where}: self-loop at bus {from_bus!r}")

    r = _phase_map(_need(entry, "r_pu", where), f"{where}.r_pu", PHASES)
    x = _phase_map(_need(entry, "x_pu", where), f"{where}.x_pu", PHASES)
    carried = tuple(ph for ph in PHASES if ph in r)
    # the branch must supply exactly the phases its downstream bus uses and
    # cannot carry a phase the upstream bus lacks
    if set(carried) != set(buses[to_bus].phases):
        raise ParseError(
            f"{where}.r_pu: branch phases {sorted(r)} must equal phases "
            f"{sorted(buses[to_bus].phases)} of bus {to_bus!r}"
        )
    if not set(carried) <= set(buses[from_bus].phases):
        raise ParseError(
            f"{where}.r_pu: branch carries a phase absent at bus {from_bus!r}"
        )

    vr = None
    if "vr" in entry:
        taps = _need(entry["vr"], "taps", f"{where}.vr")
        if not isinstance(taps, list):
            raise ParseError(f"{where}.vr.taps: expected a list")
        try:
            vr = DeviceVR(taps=tuple(float(t) for t in taps))
        except (TypeError, ValueError) as exc:
            raise ParseError(f"{where}.vr.taps: {exc}") from exc
        except ConfigError as exc:
            raise ParseError(f"{where}.vr.taps: {exc}") from exc

    try:
        return Branch(
            from_bus=from_bus,
            to_bus=to_bus,
            r=r,
            x=x,
            i_max=_num(entry, "i_max_pu", where),
            p_min=_opt_num(entry, "p_min_pu", where, -DEFAULT_FLOW_BOUND),
            p_max=_opt_num(entry, "p_max_pu", where, DEFAULT_FLOW_BOUND),
            q_min=_opt_num(entry, "q_min_pu", where, -DEFAULT_FLOW_BOUND),
            q_max=_opt_num(entry, "q_max_pu", where, DEFAULT_FLOW_BOUND),
            vr=vr,
        )
    except ConfigError as exc:
        raise ParseError(f"{where}: {exc}") from exc


def parse_network_dict(data: Mapping, source: str = "<dict>") -> Network:
    """Build and validate a Network from an already-decoded JSON object."""
    if not isinstance(data, Mapping):
        raise ParseError(f"{source}: top level must be an object")

    base_power = _num(data, "base_power_va", source)
    base_voltage = _num(data, "base_voltage_v", source)
    if base_power <= 0 or base_voltage <= 0:
        raise ParseError(f"{source}: bases must be positive")
    v_ref = _num(data, "v_ref_pu", source)

    raw_phases = _need(data, "phases", source)
    if not isinstance(raw_phases, list) or not raw_phases:
        raise ParseError(f"{source}.phases: expected a non-empty list")
    for ph in raw_phases:
        if ph not in PHASES:
            raise ParseError(f"{source}.phases: unknown phase {ph!r}")
    net_phases = tuple(ph for ph in PHASES if ph in raw_phases)

    if "pcc_bus" not in data:
        raise ConfigError(f"{source}: no PCC bus declared (field 'pcc_bus')")
    pcc = data["pcc_bus"]

    raw_buses = _need(data, "buses", source)
    if not isinstance(raw_buses, list) or len(raw_buses) < 2:
        raise ParseError(f"{source}.buses: expected a list of at least 2 buses")
    buses = [_parse_bus(b, f"{source}.buses[{i}]", net_phases) for i, b in enumerate(raw_buses)]
    by_id = {}
    for i, b in enumerate(buses):
        if b.id in by_id:
            raise ParseError(f"{source}.buses[{i}].id: duplicate bus id {b.id!r}")
        by_id[b.id] = b

    if pcc not in by_id:
        raise ConfigError(f"{source}.pcc_bus: PCC bus {pcc!r} not among buses")
    pcc_bus = by_id[pcc]
    if not (pcc_bus.v_min <= v_ref <= pcc_bus.v_max):
        raise ConfigError(
            f"{source}.v_ref_pu: reference voltage {v_ref} outside PCC bounds "
            f"[{pcc_bus.v_min}, {pcc_bus.v_max}]"
        )

    raw_branches = _need(data, "branches", source)
    if not isinstance(raw_branches, list):
        raise ParseError(f"{source}.branches: expected a list")
    branches = [
        _parse_branch(br, f"{source}.branches[{i}]", by_id) for i, br in enumerate(raw_branches)
    ]

    net = Network(
        buses=tuple(buses),
        branches=tuple(branches),
        pcc_bus=pcc,
        phases=net_phases,
        base_power=base_power,
        base_voltage=base_voltage,
        v_ref=v_ref,
    )
    validate_radial(net)  # raises TopologyError on cycles / disconnection
    return net


def parse_network(path: str | Path) -> Network:
    """Parse a network JSON file, validating schema and topology."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ParseError(f"{p}: cannot read file: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{p}: invalid JSON: {exc}") from exc
    return parse_network_dict(data, source=str(p))


# ---------------------------------------------------------------------------
# topology
# ---------------------------------------------------------------------------


def validate_radial(net: Network) -> list[Branch]:
    """Check the branch graph is a tree rooted at the PCC.

    Returns branches in breadth-first order from the PCC; every branch is
    oriented parent -> child.  Raises TopologyError otherwise, listing a
    cycle when one exists.
    """
    n_bus = len(net.buses)
    if len(net.branches) != n_bus - 1:
        raise TopologyError(
            f"need exactly {n_bus - 1} branches for {n_bus} buses, got {len(net.branches)}"
        )

    parent_edge: dict[BusId, Branch] = {}
    children: dict[BusId, list[Branch]] = {b.id: [] for b in net.buses}
    for br in net.branches:
        if br.to_bus in parent_edge:
            other = parent_edge[br.to_bus]
            raise TopologyError(
                f"bus {br.to_bus!r} has two parents "
                f"({other.from_bus!r} and {br.from_bus!r}); graph is not radial"
            )
        parent_edge[br.to_bus] = br
        children[br.from_bus].append(br)

    if net.pcc_bus in parent_edge:
        raise TopologyError(f"PCC bus {net.pcc_bus!r} must not have a parent branch")

    ordered: list[Branch] = []
    seen = {net.pcc_bus}
    queue: deque[BusId] = deque([net.pcc_bus])
    while queue:
        cur = queue.popleft()
        for br in children[cur]:
            ordered.append(br)
            seen.add(br.to_bus)
            queue.append(br.to_bus)

    if len(seen) != n_bus:
        unreached = [b.id for b in net.buses if b.id not in seen]
        # walk parent pointers from an unreached bus until a repeat: a cycle
        walk: list[BusId] = []
        cur = unreached[0]
        while cur not in walk:
            walk.append(cur)
            if cur not in parent_edge:
                raise TopologyError(f"buses {unreached!r} are disconnected from the PCC")
            cur = parent_edge[cur].from_bus
        cycle = walk[walk.index(cur):] + [cur]
        raise TopologyError(
            "cycle detected: " + " -> ".join(repr(b) for b in reversed(cycle))
        )
    return ordered
