import csv
import json

import pytest

import bess_placement
from bess_placement import EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, exit_code_for, main
from conftest import CASE39_PATH
from powerflow import PowerFlowDivergence
from study import ConfigError, StageError


@pytest.fixture
def short_config(tmp_path):
    path = tmp_path / "short.json"
    path.write_text(json.dumps({
        "case_path": CASE39_PATH,
        "sim": {"dt": 0.005, "t_end": 0.5},
        "snapshot_time": 0.4,
        "workers": 1,
    }), encoding="utf-8")
    return str(path)


def test_powerflow_command_writes_solution(tmp_path):
    out = tmp_path / "out"
    assert main(["powerflow", "--out", str(out)]) == EXIT_OK
    with open(out / "powerflow.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 39
    assert (out / "bess_placement.log").exists()


def test_simulate_command_writes_trajectory(tmp_path, short_config):
    out = tmp_path / "out"
    code = main(["simulate", "--config", short_config, "--out", str(out), "--fault-bus", "16",
                 "--bess", "34", "35"])
    assert code == EXIT_OK
    with open(out / "trajectory_bus16.csv", encoding="utf-8") as f:
        header = next(csv.reader(f))
        assert header[-2:] == ["soc_34", "soc_35"]
        assert sum(1 for _ in f) == 101


def test_check_command_writes_violations(tmp_path, short_config):
    out = tmp_path / "out"
    assert main(["check", "--config", short_config, "--out", str(out), "--fault-bus", "16"]) == EXIT_OK
    with open(out / "violations_bus16.csv", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [int(r["bus"]) for r in rows] == list(range(1, 40))


def test_missing_config_is_validation_error(tmp_path):
    assert main(["powerflow", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_malformed_case_is_validation_error(tmp_path):
    case = tmp_path / "broken.json"
    case.write_text('{"buses": [', encoding="utf-8")
    assert main(["powerflow", "--case", str(case), "--out", str(tmp_path)]) == EXIT_VALIDATION


def test_unknown_fault_bus_is_validation_error(tmp_path, short_config):
    code = main(["simulate", "--config", short_config, "--out", str(tmp_path), "--fault-bus", "99"])
    assert code == EXIT_VALIDATION


def test_divergent_power_flow_is_numerical_error(tmp_path, two_bus_data):
    two_bus_data["buses"][1]["p_load"] = 5000.0
    two_bus_data["buses"][1]["q_load"] = 3000.0
    case = tmp_path / "heavy.json"
    case.write_text(json.dumps(two_bus_data), encoding="utf-8")
    assert main(["powerflow", "--case", str(case), "--out", str(tmp_path)]) == EXIT_NUMERICAL


def test_exit_code_unwraps_stage_errors():
    try:
        try:
            raise PowerFlowDivergence("no convergence", [1.0])
        except PowerFlowDivergence as e:
            raise StageError("powerflow", str(e)) from e
    except StageError as wrapped:
        assert exit_code_for(wrapped) == EXIT_NUMERICAL
    assert exit_code_for(ConfigError("bad")) == EXIT_VALIDATION
    assert exit_code_for(RuntimeError("boom")) == 1


def test_every_command_is_registered():
    for command in ("powerflow", "simulate", "check", "rank", "place", "study", "sweep", "compare"):
        assert command in bess_placement.COMMANDS
    args = bess_placement.parse_arguments(["place", "--method", "pso", "--seed", "4"])
    assert args.method == "pso" and args.seed == 4
    args = bess_placement.parse_arguments(["compare", "--seeds", "3", "5", "--no-match-budget"])
    assert args.seeds == [3, 5] and args.no_match_budget
