"""Grid data model, case-file parsing/validation and placement candidates.

Case files are JSON. Loads and bus shunts are stored in MW / MVAr (shunts at
1 pu voltage), machine constants on the machine's own MVA base, BESS energy
in MWh. Everything is converted to system per-unit on parse.
"""
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

logger = logging.getLogger(__name__)

BUS_KINDS = ("slack", "pv", "pq")
DEFAULT_MVA_BASE = 100.0
DEFAULT_NOMINAL_HZ = 60.0
# decimals kept when writing per-unit values back in MW/MVAr
_ROUND_DIGITS = 10


class CaseSchemaError(ValueError):
    """Case text does not follow the schema (bad JSON, missing/invalid field)."""


class CaseValidationError(ValueError):
    """Case parses but violates a network invariant."""


@dataclass(frozen=True)
class Bus:
    id: int
    kind: str
    base_kv: float
    v_setpoint: float = 1.0
    p_load: float = 0.0
    q_load: float = 0.0
    shunt_g: float = 0.0
    shunt_b: float = 0.0
    is_generator_bus: bool = False


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float = 0.0
    tap_ratio: float = 1.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    """Machine constants on system base; p_gen is the dispatch in per-unit."""
    bus: int
    mva_base: float
    p_gen: float
    h: float
    d: float
    xd: float
    xq: float
    xd_p: float
    xq_p: float
    td0_p: float
    tq0_p: float
    avr_gain: float
    avr_time: float
    efd_min: float
    efd_max: float


@dataclass(frozen=True)
class BessSpec:
    k_es: float = 10.0
    t_es: float = 0.02
    e_total: float = 10.0
    soc_init: float = 0.5
    soc_min: float = 0.20
    soc_max: float = 0.80
    p_max: float = 1.0
    system_mva_base: float = DEFAULT_MVA_BASE

    @property
    def e_pu_s(self) -> float:
        """Energy capacity in per-unit-seconds on the system base."""
        return self.e_total * 3600.0 / self.system_mva_base


@dataclass(frozen=True)
class NetworkCase:
    buses: Tuple[Bus, ...]
    branches: Tuple[Branch, ...]
    generators: Tuple[Generator, ...]
    bess_template: BessSpec = field(default_factory=BessSpec)
    system_mva_base: float = DEFAULT_MVA_BASE
    nominal_hz: float = DEFAULT_NOMINAL_HZ
    placement_exclusions: Tuple[int, ...] = ()

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def bus_ids(self) -> List[int]:
        return [bus.id for bus in self.buses]

    @property
    def bus_index(self) -> Dict[int, int]:
        return {bus.id: i for i, bus in enumerate(self.buses)}

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_index[bus_id]]

    def generator_at(self, bus_id: int) -> Optional[Generator]:
        for gen in self.generators:
            if gen.bus == bus_id:
                return gen
        return None


# ------------------------ Parsing ------------------------
def _require(record: dict, key: str, where: str):
    if key not in record:
        raise CaseSchemaError(f"{where}: missing field '{key}'")
    return record[key]


def _number(record: dict, key: str, where: str, default=None) -> float:
    if key not in record:
        if default is None:
            raise CaseSchemaError(f"{where}: missing field '{key}'")
        return float(default)
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise CaseSchemaError(f"{where}: field '{key}' must be a number, got {value!r}")
    return float(value)


def _records(data: dict, key: str) -> list:
    records = data.get(key, [])
    if not isinstance(records, list):
        raise CaseSchemaError(f"top-level '{key}' must be a list")
    for i, record in enumerate(records):
        if not isinstance(record, dict):
            raise CaseSchemaError(f"{key}[{i}]: expected an object")
    return records


def _parse_bus(record: dict, where: str, base: float, generator_buses: set) -> Bus:
    bus_id = _require(record, "id", where)
    if isinstance(bus_id, bool) or not isinstance(bus_id, int) or bus_id <= 0:
        raise CaseSchemaError(f"{where}: field 'id' must be a positive integer, got {bus_id!r}")
    kind = _require(record, "kind", where)
    if kind not in BUS_KINDS:
        raise CaseSchemaError(f"{where}: field 'kind' must be one of {BUS_KINDS}, got {kind!r}")
    is_gen = record.get("is_generator_bus", bus_id in generator_buses)
    if not isinstance(is_gen, bool):
        raise CaseSchemaError(f"{where}: field 'is_generator_bus' must be a boolean")
    return Bus(
        id=bus_id,
        kind=kind,
        base_kv=_number(record, "base_kv", where),
        v_setpoint=_number(record, "v_setpoint", where, 1.0),
        p_load=_number(record, "p_load", where, 0.0) / base,
        q_load=_number(record, "q_load", where, 0.0) / base,
        shunt_g=_number(record, "shunt_g", where, 0.0) / base,
        shunt_b=_number(record, "shunt_b", where, 0.0) / base,
        is_generator_bus=is_gen,
    )


def _parse_branch(record: dict, where: str) -> Branch:
    in_service = record.get("in_service", True)
    if not isinstance(in_service, bool):
        raise CaseSchemaError(f"{where}: field 'in_service' must be a boolean")
    return Branch(
        from_bus=int(_number(record, "from_bus", where)),
        to_bus=int(_number(record, "to_bus", where)),
        r=_number(record, "r", where),
        x=_number(record, "x", where),
        b_shunt=_number(record, "b_shunt", where, 0.0),
        tap_ratio=_number(record, "tap_ratio", where, 1.0),
        in_service=in_service,
    )


def _parse_generator(record: dict, where: str, base: float) -> Generator:
    mva = _number(record, "mva_base", where, base)
    if mva <= 0:
        raise CaseSchemaError(f"{where}: field 'mva_base' must be positive")
    z_scale = base / mva  # machine base -> system base for impedances
    return Generator(
        bus=int(_number(record, "bus", where)),
        mva_base=mva,
        p_gen=_number(record, "p_gen", where, 0.0) / base,
        h=_number(record, "h", where) / z_scale,
        d=_number(record, "d", where, 0.0) / z_scale,
        xd=_number(record, "xd", where) * z_scale,
        xq=_number(record, "xq", where) * z_scale,
        xd_p=_number(record, "xd_p", where) * z_scale,
        xq_p=_number(record, "xq_p", where) * z_scale,
        td0_p=_number(record, "td0_p", where),
        tq0_p=_number(record, "tq0_p", where),
        avr_gain=_number(record, "avr_gain", where),
        avr_time=_number(record, "avr_time", where),
        efd_min=_number(record, "efd_min", where),
        efd_max=_number(record, "efd_max", where),
    )


def _parse_bess(record: dict, base: float) -> BessSpec:
    defaults = BessSpec()
    where = "bess_template"
    return BessSpec(
        k_es=_number(record, "k_es", where, defaults.k_es),
        t_es=_number(record, "t_es", where, defaults.t_es),
        e_total=_number(record, "e_total", where, defaults.e_total),
        soc_init=_number(record, "soc_init", where, defaults.soc_init),
        soc_min=_number(record, "soc_min", where, defaults.soc_min),
        soc_max=_number(record, "soc_max", where, defaults.soc_max),
        p_max=_number(record, "p_max", where, defaults.p_max),
        system_mva_base=base,
    )


def parse_case(text: str) -> NetworkCase:
    """Parse and validate case-file text into a NetworkCase."""
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise CaseSchemaError(f"line {e.lineno}, column {e.colno}: invalid JSON ({e.msg})") from e
    if not isinstance(data, dict):
        raise CaseSchemaError("case file must contain a JSON object")

    system = data.get("system", {})
    if not isinstance(system, dict):
        raise CaseSchemaError("top-level 'system' must be an object")
    base = _number(system, "mva_base", "system", DEFAULT_MVA_BASE)
    nominal_hz = _number(system, "nominal_hz", "system", DEFAULT_NOMINAL_HZ)
    if base <= 0 or nominal_hz <= 0:
        raise CaseSchemaError("system: 'mva_base' and 'nominal_hz' must be positive")

    generators = [_parse_generator(r, f"generators[{i}]", base)
                  for i, r in enumerate(_records(data, "generators"))]
    generator_buses = {gen.bus for gen in generators}

    buses = []
    seen = set()
    for i, record in enumerate(_records(data, "buses")):
        bus = _parse_bus(record, f"buses[{i}]", base, generator_buses)
        if bus.id in seen:
            raise CaseSchemaError(f"buses[{i}]: duplicate bus id {bus.id}")
        seen.add(bus.id)
        buses.append(bus)

    branches = [_parse_branch(r, f"branches[{i}]") for i, r in enumerate(_records(data, "branches"))]

    bess_record = data.get("bess_template", {})
    if not isinstance(bess_record, dict):
        raise CaseSchemaError("top-level 'bess_template' must be an object")

    exclusions = data.get("placement_exclusions", [])
    if not isinstance(exclusions, list) or not all(isinstance(b, int) and not isinstance(b, bool) for b in exclusions):
        raise CaseSchemaError("top-level 'placement_exclusions' must be a list of bus ids")

    case = NetworkCase(
        buses=tuple(sorted(buses, key=lambda b: b.id)),
        branches=tuple(branches),
        generators=tuple(sorted(generators, key=lambda g: g.bus)),
        bess_template=_parse_bess(bess_record, base),
        system_mva_base=base,
        nominal_hz=nominal_hz,
        placement_exclusions=tuple(sorted(set(exclusions))),
    )
    validate_case(case)
    logger.debug(f"Parsed case with {case.n_bus} buses, {len(case.branches)} branches, "
                 f"{len(case.generators)} generators")
    return case


def load_case(path: str) -> NetworkCase:
    with open(path, "r", encoding="utf-8") as f:
        return parse_case(f.read())


# ------------------------ Validation ------------------------
def _connected(case: NetworkCase) -> bool:
    index = case.bus_index
    adjacency: Dict[int, List[int]] = {i: [] for i in range(case.n_bus)}
    for br in case.branches:
        if br.in_service:
            adjacency[index[br.from_bus]].append(index[br.to_bus])
            adjacency[index[br.to_bus]].append(index[br.from_bus])
    seen = {0}
    stack = [0]
    while stack:
        for nxt in adjacency[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == case.n_bus


def validate_case(case: NetworkCase) -> None:
    """Raise CaseValidationError naming the first violated invariant."""
    if not case.buses:
        raise CaseValidationError("case has no buses")
    slack = [b.id for b in case.buses if b.kind == "slack"]
    if len(slack) != 1:
        raise CaseValidationError(f"exactly one slack bus required, found {len(slack)}: {slack}")
    ids = set(case.bus_ids)
    for bus in case.buses:
        if bus.base_kv <= 0:
            raise CaseValidationError(f"bus {bus.id}: base_kv must be > 0")
        if bus.v_setpoint <= 0:
            raise CaseValidationError(f"bus {bus.id}: v_setpoint must be > 0")

    for i, br in enumerate(case.branches):
        if br.from_bus not in ids or br.to_bus not in ids:
            raise CaseValidationError(f"branch {i} ({br.from_bus}-{br.to_bus}): endpoint bus does not exist")
        if br.from_bus == br.to_bus:
            raise CaseValidationError(f"branch {i}: from_bus equals to_bus ({br.from_bus})")
        if br.x == 0:
            raise CaseValidationError(f"branch {i} ({br.from_bus}-{br.to_bus}): x must be non-zero")
        if br.tap_ratio <= 0:
            raise CaseValidationError(f"branch {i} ({br.from_bus}-{br.to_bus}): tap_ratio must be > 0")

    seen_gen_buses = set()
    for gen in case.generators:
        if gen.bus not in ids:
            raise CaseValidationError(f"generator at bus {gen.bus}: bus does not exist")
        if gen.bus in seen_gen_buses:
            raise CaseValidationError(f"generator at bus {gen.bus}: at most one generator per bus")
        seen_gen_buses.add(gen.bus)
        if case.bus(gen.bus).kind == "pq":
            raise CaseValidationError(f"generator at bus {gen.bus}: generator bus must be pv or slack")
        if gen.h <= 0:
            raise CaseValidationError(f"generator at bus {gen.bus}: h must be > 0")
        if gen.td0_p <= 0 or gen.tq0_p <= 0:
            raise CaseValidationError(f"generator at bus {gen.bus}: td0_p and tq0_p must be > 0")
        if not (gen.xd >= gen.xd_p > 0) or not (gen.xq >= gen.xq_p > 0):
            raise CaseValidationError(f"generator at bus {gen.bus}: requires xd >= xd_p > 0 and xq >= xq_p > 0")
        if gen.avr_time <= 0:
            raise CaseValidationError(f"generator at bus {gen.bus}: avr_time must be > 0")
        if not gen.efd_min < gen.efd_max:
            raise CaseValidationError(f"generator at bus {gen.bus}: efd_min must be < efd_max")

    for bus in case.buses:
        if bus.kind != "pq" and bus.id not in seen_gen_buses:
            raise CaseValidationError(f"bus {bus.id}: {bus.kind} bus must host a generator")

    spec = case.bess_template
    if not 0 <= spec.soc_min < spec.soc_init < spec.soc_max <= 1:
        raise CaseValidationError("bess_template: requires 0 <= soc_min < soc_init < soc_max <= 1")
    if spec.k_es <= 0 or spec.t_es <= 0 or spec.p_max <= 0 or spec.e_total <= 0:
        raise CaseValidationError("bess_template: k_es, t_es, e_total and p_max must be > 0")

    for bus_id in case.placement_exclusions:
        if bus_id not in ids:
            raise CaseValidationError(f"placement_exclusions: bus {bus_id} does not exist")

    if not _connected(case):
        raise CaseValidationError("network graph is not connected over in-service branches")


# ------------------------ Serialization ------------------------
def _mw(value: float, base: float) -> float:
    return round(value * base, _ROUND_DIGITS)


def serialize_case(case: NetworkCase) -> str:
    """Write a case back in file units; parse_case(serialize_case(c)) == c."""
    base = case.system_mva_base
    buses = []
    for bus in case.buses:
        record = asdict(bus)
        for key in ("p_load", "q_load", "shunt_g", "shunt_b"):
            record[key] = _mw(record[key], base)
        buses.append(record)
    generators = []
    for gen in case.generators:
        record = asdict(gen)
        z_scale = base / gen.mva_base
        record["p_gen"] = _mw(gen.p_gen, base)
        record["h"] = round(gen.h * z_scale, _ROUND_DIGITS)
        record["d"] = round(gen.d * z_scale, _ROUND_DIGITS)
        for key in ("xd", "xq", "xd_p", "xq_p"):
            record[key] = round(record[key] / z_scale, _ROUND_DIGITS)
        generators.append(record)
    bess = asdict(case.bess_template)
    bess.pop("system_mva_base")
    data = {
        "system": {"mva_base": base, "nominal_hz": case.nominal_hz},
        "buses": buses,
        "branches": [asdict(br) for br in case.branches],
        "generators": generators,
        "bess_template": bess,
        "placement_exclusions": list(case.placement_exclusions),
    }
    return json.dumps(data, indent=2)


# ------------------------ Placement candidates ------------------------
def candidate_buses(case: NetworkCase, exclusions: Optional[Sequence[int]] = None) -> List[int]:
    """Ascending bus ids eligible for BESS placement (case exclusions by default)."""
    excluded = set(case.placement_exclusions if exclusions is None else exclusions)
    return sorted(bus.id for bus in case.buses if bus.id not in excluded)
