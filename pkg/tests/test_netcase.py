import json

import pytest

from netcase import (BessSpec, CaseSchemaError, CaseValidationError, candidate_buses, parse_case,
                     serialize_case)


def test_parse_two_bus(two_bus_case):
    assert two_bus_case.n_bus == 2
    assert two_bus_case.bus_ids == [1, 2]
    assert two_bus_case.bus(1).is_generator_bus
    assert not two_bus_case.bus(2).is_generator_bus
    assert two_bus_case.bess_template == BessSpec()


def test_loads_converted_to_per_unit(three_bus_case):
    bus = three_bus_case.bus(3)
    assert bus.p_load == pytest.approx(1.5)
    assert bus.q_load == pytest.approx(0.6)
    assert bus.shunt_b == pytest.approx(0.1)
    assert three_bus_case.generator_at(2).p_gen == pytest.approx(0.8)


def test_machine_constants_converted_from_machine_base(two_bus_data):
    two_bus_data["generators"][0]["mva_base"] = 200.0
    case = parse_case(json.dumps(two_bus_data))
    gen = case.generators[0]
    assert gen.xd_p == pytest.approx(0.15)
    assert gen.h == pytest.approx(10.0)
    assert gen.td0_p == pytest.approx(6.0)


def test_bundled_case(case39):
    assert case39.n_bus == 39
    assert len(case39.branches) == 46
    assert len(case39.generators) == 10
    assert [b.id for b in case39.buses if b.kind == "slack"] == [31]
    assert sum(b.is_generator_bus for b in case39.buses) == 10


def test_round_trip(case39, three_bus_case):
    for case in (case39, three_bus_case):
        assert parse_case(serialize_case(case)) == case


def test_invalid_json_reports_line():
    with pytest.raises(CaseSchemaError, match="line 1"):
        parse_case("{not json")


def test_missing_field_named(two_bus_data):
    del two_bus_data["buses"][1]["base_kv"]
    with pytest.raises(CaseSchemaError, match="buses\\[1\\]: missing field 'base_kv'"):
        parse_case(json.dumps(two_bus_data))


def test_duplicate_bus_id(two_bus_data):
    two_bus_data["buses"][1]["id"] = 1
    with pytest.raises(CaseSchemaError, match="duplicate bus id 1"):
        parse_case(json.dumps(two_bus_data))


def test_non_numeric_field(two_bus_data):
    two_bus_data["branches"][0]["x"] = "0.1"
    with pytest.raises(CaseSchemaError, match="'x' must be a number"):
        parse_case(json.dumps(two_bus_data))


@pytest.mark.parametrize("mutate, message", [
    (lambda d: d["buses"][1].update(kind="slack"), "exactly one slack bus"),
    (lambda d: d["branches"][0].update(x=0.0), "x must be non-zero"),
    (lambda d: d["branches"][0].update(to_bus=7), "endpoint bus does not exist"),
    (lambda d: d["generators"][0].update(xd_p=2.0), "xd >= xd_p"),
    (lambda d: d.update(bess_template={"soc_min": 0.6}), "soc_min < soc_init"),
    (lambda d: d.update(placement_exclusions=[9]), "bus 9 does not exist"),
])
def test_validation_errors(two_bus_data, mutate, message):
    mutate(two_bus_data)
    with pytest.raises(CaseValidationError, match=message):
        parse_case(json.dumps(two_bus_data))


def test_disconnected_network(two_bus_data):
    two_bus_data["branches"][0]["in_service"] = False
    with pytest.raises(CaseValidationError, match="not connected"):
        parse_case(json.dumps(two_bus_data))


def test_pv_bus_needs_generator(three_bus_data):
    three_bus_data["generators"] = three_bus_data["generators"][:1]
    with pytest.raises(CaseValidationError, match="bus 2: pv bus must host a generator"):
        parse_case(json.dumps(three_bus_data))


def test_candidate_buses(case39, two_bus_data):
    assert candidate_buses(case39) == list(range(1, 40))
    assert candidate_buses(case39, exclusions=[39, 1]) == list(range(2, 39))
    two_bus_data["placement_exclusions"] = [1]
    assert candidate_buses(parse_case(json.dumps(two_bus_data))) == [2]
