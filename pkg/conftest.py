import copy
import json
import os

import pytest

from netcase import load_case, parse_case
from powerflow import solve_power_flow

ROOT = os.path.dirname(os.path.abspath(__file__))
CASE39_PATH = os.path.join(ROOT, "cases", "new_england_39.json")
STUDY39_PATH = os.path.join(ROOT, "cases", "study_39.json")

MACHINE = {
    "mva_base": 100.0, "h": 5.0, "d": 2.0,
    "xd": 1.0, "xq": 0.9, "xd_p": 0.3, "xq_p": 0.5,
    "td0_p": 6.0, "tq0_p": 0.5,
    "avr_gain": 50.0, "avr_time": 0.05, "efd_min": -5.0, "efd_max": 8.0,
}

TWO_BUS = {
    "system": {"mva_base": 100.0, "nominal_hz": 60.0},
    "buses": [
        {"id": 1, "kind": "slack", "base_kv": 345.0, "v_setpoint": 1.0},
        {"id": 2, "kind": "pq", "base_kv": 345.0},
    ],
    "branches": [{"from_bus": 1, "to_bus": 2, "r": 0.0, "x": 0.1}],
    "generators": [dict(MACHINE, bus=1, p_gen=0.0)],
}

THREE_BUS = {
    "system": {"mva_base": 100.0, "nominal_hz": 60.0},
    "buses": [
        {"id": 1, "kind": "slack", "base_kv": 230.0, "v_setpoint": 1.05},
        {"id": 2, "kind": "pv", "base_kv": 230.0, "v_setpoint": 1.02, "p_load": 20.0, "q_load": 10.0},
        {"id": 3, "kind": "pq", "base_kv": 230.0, "p_load": 150.0, "q_load": 60.0, "shunt_b": 10.0},
    ],
    "branches": [
        {"from_bus": 1, "to_bus": 2, "r": 0.02, "x": 0.06, "b_shunt": 0.06},
        {"from_bus": 1, "to_bus": 3, "r": 0.08, "x": 0.24, "b_shunt": 0.05},
        {"from_bus": 2, "to_bus": 3, "r": 0.06, "x": 0.18, "b_shunt": 0.04, "tap_ratio": 0.98},
    ],
    "generators": [
        dict(MACHINE, bus=1, p_gen=0.0),
        dict(MACHINE, bus=2, p_gen=80.0, h=3.0),
    ],
}


@pytest.fixture
def two_bus_data():
    return copy.deepcopy(TWO_BUS)


@pytest.fixture
def three_bus_data():
    return copy.deepcopy(THREE_BUS)


@pytest.fixture
def two_bus_case():
    return parse_case(json.dumps(TWO_BUS))


@pytest.fixture
def three_bus_case():
    return parse_case(json.dumps(THREE_BUS))


@pytest.fixture(scope="session")
def case39():
    return load_case(CASE39_PATH)


@pytest.fixture(scope="session")
def case39_data():
    with open(CASE39_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="session")
def pf39(case39):
    return solve_power_flow(case39)
