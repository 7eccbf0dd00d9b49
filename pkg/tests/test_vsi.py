import os

import numpy as np
import pytest

from dynsim import Contingency, SimConfig, Trajectory, simulate
from vsi import (ContingencyResult, CriteriaConfig, StructuralError, ViolationMask,
                 build_bus_fault_sweep, check_criteria, rank_contingencies, ranking_rows,
                 severity_index, voltage_variation, vsi_placement, vsi_sensitivity)

V0 = np.array([1.0, 1.0])
CRITERIA = CriteriaConfig()


def make_traj(v_mag, dt=0.005, contingency=None):
    v_mag = np.asarray(v_mag, dtype=float)
    n_t = v_mag.shape[0]
    return Trajectory(times=np.arange(n_t) * dt, v_mag=v_mag, delta_f=np.zeros_like(v_mag),
                      bess_p=np.zeros((n_t, 0)), bess_soc=np.zeros((n_t, 0)), bus_ids=[1, 2],
                      contingency=contingency)


def flat(n_t=1001):
    return np.ones((n_t, 2))


@pytest.mark.parametrize("v_t, v0, expected", [
    (1.0, 1.0, 0.0),
    (0.9, 1.0, 0.1),
    (1.14, 0.95, 0.2),
])
def test_voltage_variation(v_t, v0, expected):
    assert voltage_variation(v_t, v0) == pytest.approx(expected, abs=1e-12)


def test_voltage_variation_rejects_nonpositive_base():
    with pytest.raises(ValueError):
        voltage_variation(1.0, 0.0)


def test_flat_trajectory_has_no_violations(two_bus_case):
    mask = check_criteria(make_traj(flat()), V0, CRITERIA, two_bus_case)
    assert mask.total_violated_samples == 0
    assert mask.violated_buses() == []


def test_load_bus_dip(two_bus_case):
    v = flat()
    v[200, 1] = 0.70
    mask = check_criteria(make_traj(v), V0, CRITERIA, two_bus_case)
    assert mask.violated[200, 1]
    assert mask.total_violated_samples == 1
    assert mask.first_violation_time(2) == pytest.approx(1.0)


def test_generator_bus_allows_larger_dip(two_bus_case):
    v = flat()
    v[200, 0] = 0.72
    assert check_criteria(make_traj(v), V0, CRITERIA, two_bus_case).total_violated_samples == 0
    v[200, 0] = 0.69
    assert check_criteria(make_traj(v), V0, CRITERIA, two_bus_case).violated[200, 0]


@pytest.mark.parametrize("cycles, violated", [(25, True), (10, False)])
def test_sustained_overshoot_at_load_bus(two_bus_case, cycles, violated):
    v = flat()
    n = int(round(cycles / 60.0 / 0.005))
    v[100:100 + n, 1] = 1.22
    mask = check_criteria(make_traj(v), V0, CRITERIA, two_bus_case)
    assert mask.violated[:, 1].any() == violated
    if violated:
        assert mask.violated[100:100 + n, 1].all()
        assert mask.total_violated_samples == n


def test_sustained_overshoot_ignored_at_generator_bus(two_bus_case):
    v = flat()
    v[100:200, 0] = 1.22
    assert check_criteria(make_traj(v), V0, CRITERIA, two_bus_case).total_violated_samples == 0


@pytest.mark.parametrize("level, violated", [(0.94, True), (0.96, False)])
def test_post_transient_deviation(two_bus_case, level, violated):
    v = flat()
    v[-50:, 0] = level
    mask = check_criteria(make_traj(v), V0, CRITERIA, two_bus_case)
    window = mask.times >= 4.0 - 1e-9
    assert mask.violated[window, 0].all() == violated
    assert not mask.violated[~window].any()


def test_during_fault_samples_excluded(two_bus_case):
    v = flat()
    v[5:20, 1] = 0.05
    fault = Contingency(2, t_apply=0.0, t_clear=0.1)
    assert check_criteria(make_traj(v, contingency=fault), V0, CRITERIA, two_bus_case).total_violated_samples == 0
    v[20, 1] = 0.05
    assert check_criteria(make_traj(v, contingency=fault), V0, CRITERIA, two_bus_case).violated[20, 1]


def test_worse_voltages_never_fewer_violations(two_bus_case):
    rng = np.random.default_rng(3)
    for _ in range(20):
        v = 1.0 + rng.normal(0, 0.12, (1001, 2))
        worse = 1.0 + 1.3 * (v - 1.0)
        base = check_criteria(make_traj(v), V0, CRITERIA, two_bus_case)
        harder = check_criteria(make_traj(worse), V0, CRITERIA, two_bus_case)
        assert harder.total_violated_samples >= base.total_violated_samples


def test_severity_index_examples():
    traj = make_traj([[1.0, 1.0], [0.7, 1.0]])
    none = ViolationMask(np.zeros((2, 2), dtype=bool), traj.times, [1, 2])
    assert severity_index(traj, V0, none) == 0.0
    single = ViolationMask(np.array([[False, False], [True, False]]), traj.times, [1, 2])
    assert severity_index(traj, V0, single) == pytest.approx(0.075, abs=1e-12)
    uniform = make_traj(np.full((4, 2), 0.8))
    every = ViolationMask(np.ones((4, 2), dtype=bool), uniform.times, [1, 2])
    assert severity_index(uniform, V0, every) == pytest.approx(0.2, abs=1e-12)


def test_severity_bounded_by_largest_deviation(two_bus_case):
    v = flat()
    v[300:400, 1] = 0.6
    traj = make_traj(v)
    mask = check_criteria(traj, V0, CRITERIA, two_bus_case)
    si = severity_index(traj, V0, mask)
    assert 0 < si <= np.max(voltage_variation(v, V0))


def test_summary_rows(two_bus_case):
    v = flat()
    v[10, 1] = 0.5
    rows = check_criteria(make_traj(v), V0, CRITERIA, two_bus_case).summary_rows()
    assert rows == [
        {"bus": 1, "violated_samples": 0, "first_violation_time": None},
        {"bus": 2, "violated_samples": 1, "first_violation_time": pytest.approx(0.05)},
    ]


# ------------------------ Ranking ------------------------
@pytest.fixture(scope="module")
def short_sim():
    return SimConfig(dt=0.005, t_end=1.5)


def test_rank_singleton(three_bus_case, short_sim):
    results = rank_contingencies(three_bus_case, [Contingency(3)], CRITERIA, short_sim)
    assert len(results) == 1
    assert results[0].si >= 0
    assert results[0].baseline.v_mag.shape == (301, 3)


def test_rank_duplicates_and_order(three_bus_case, short_sim):
    scenarios = [Contingency(3), Contingency(2), Contingency(3)]
    results = rank_contingencies(three_bus_case, scenarios, CRITERIA, short_sim)
    si = [r.si for r in results]
    assert si == sorted(si, reverse=True)
    threes = [r for r in results if r.fault_bus == 3]
    assert threes[0].si == threes[1].si
    assert ranking_rows(results)[0].keys() == {"fault_bus", "si"}


def test_rank_empty_set(three_bus_case):
    with pytest.raises(ValueError):
        rank_contingencies(three_bus_case, [])


def test_bus_fault_sweep(case39):
    sweep = build_bus_fault_sweep(case39)
    assert [c.fault_bus for c in sweep] == list(range(1, 40))
    assert all(c.t_apply == 0.0 and c.t_clear == pytest.approx(0.1) for c in sweep)
    assert build_bus_fault_sweep(case39, [16], t_apply=0.2, duration=0.05)[0].t_clear == pytest.approx(0.25)
    with pytest.raises(ValueError):
        build_bus_fault_sweep(case39, [])
    with pytest.raises(ValueError):
        build_bus_fault_sweep(case39, [40])


# ------------------------ Placement index ------------------------
def test_sensitivity_examples():
    old = make_traj([[1.0, 1.0], [0.8, 0.9], [0.9, 0.95]])
    assert vsi_sensitivity(old, old, 0, 30.0) == 0.0
    new = make_traj([[1.0, 1.0], [0.85, 0.9], [0.92, 0.95]])
    assert vsi_sensitivity(new, old, 0, 30.0) == pytest.approx(0.05 / 30, abs=1e-15)
    assert vsi_sensitivity(new, old, 0, 60.0) == pytest.approx(0.5 * vsi_sensitivity(new, old, 0, 30.0))
    worse = make_traj(old.v_mag - 0.01)
    assert vsi_sensitivity(worse, old, 1, 30.0) == pytest.approx(-0.01 / 30)
    with pytest.raises(ValueError):
        vsi_sensitivity(new, old, 0, 0.0)


def test_index_chain_against_hand_computation(two_bus_case):
    dt = 0.05
    c_a = Contingency(1, t_apply=0.0, t_clear=0.0)
    c_b = Contingency(2, t_apply=0.0, t_clear=0.0)
    old_a = make_traj([[1.0, 1.0], [0.8, 0.9], [0.95, 0.97]], dt, c_a)
    new_a = make_traj([[1.0, 1.0], [0.85, 0.92], [0.97, 0.96]], dt, c_a)
    old_b = make_traj([[1.0, 1.0], [0.7, 0.96], [0.9, 0.99]], dt, c_b)
    new_b = make_traj(old_b.v_mag - 0.01, dt, c_b)

    results = []
    for old in (old_a, old_b):
        mask = check_criteria(old, V0, CRITERIA, two_bus_case)
        results.append(ContingencyResult(old.contingency, severity_index(old, V0, mask), old, mask))
    # a: both buses drift more than 5% somewhere in the tail window, every sample counts
    assert results[0].si == pytest.approx(0.38 / 6, abs=1e-12)
    # b: only the generator bus drifts
    assert results[1].si == pytest.approx(0.40 / 6, abs=1e-12)

    value = vsi_placement([new_a, new_b], results, total_gain=30.0)
    expected = (0.38 / 6) * (0.05 + 0.02) / 2 / 30 + (0.40 / 6) * (-0.01 - 0.01) / 2 / 30
    assert value == pytest.approx(expected, abs=1e-12)


def test_placement_index_linear_in_sensitivities():
    old = make_traj([[1.0, 1.0], [0.8, 0.9], [0.9, 0.95]])
    new = make_traj([[1.0, 1.0], [0.83, 0.94], [0.92, 0.95]])
    scaled = make_traj(old.v_mag + 2.0 * (new.v_mag - old.v_mag))
    result = [ContingencyResult(Contingency(1), 0.05, old)]
    assert vsi_placement([old], result, 30.0) == 0.0
    assert vsi_placement([scaled], result, 30.0) == pytest.approx(2.0 * vsi_placement([new], result, 30.0))
    uniform = (0.03 + 0.04) / 2 / 30
    assert vsi_placement([new], result, 30.0) == pytest.approx(0.05 * uniform)


def test_placement_index_structural_errors():
    old = make_traj(flat(3), contingency=Contingency(1))
    result = [ContingencyResult(Contingency(1), 0.05, old)]
    with pytest.raises(StructuralError):
        vsi_placement([old, old], result, 30.0)
    with pytest.raises(StructuralError):
        vsi_placement([make_traj(flat(3), contingency=Contingency(2))], result, 30.0)
    with pytest.raises(StructuralError):
        vsi_placement([make_traj(flat(4), contingency=Contingency(1))], result, 30.0)


# ------------------------ Bundled case ------------------------
@pytest.fixture(scope="module")
def bus16_masks(case39, pf39):
    fault = Contingency(16, t_apply=0.0, t_clear=0.1)
    masks = {}
    for name, placement in (("no_bess", None), ("bess", [34, 35, 36])):
        traj = simulate(case39, placement, fault, SimConfig(), pf39)
        masks[name] = check_criteria(traj, pf39.v_mag, CRITERIA, case39)
    return masks


@pytest.mark.slow
def test_bus16_fault_violates_without_bess(bus16_masks):
    assert bus16_masks["no_bess"].total_violated_samples > 0
    assert len(bus16_masks["no_bess"].violated_buses()) >= 1


@pytest.mark.slow
def test_bess_near_fault_reduces_violations(bus16_masks):
    assert bus16_masks["bess"].total_violated_samples < bus16_masks["no_bess"].total_violated_samples


@pytest.mark.slow
def test_bus16_among_five_most_severe(case39, pf39):
    results = rank_contingencies(case39, build_bus_fault_sweep(case39), CRITERIA, SimConfig(), pf39,
                                 workers=os.cpu_count() or 1)
    assert 16 in [r.fault_bus for r in results[:5]]
    assert results[0].si > 0
