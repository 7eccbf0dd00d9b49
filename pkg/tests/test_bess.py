import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from bess import BessState, advance, gate_reference, initial_state, reference_power, step_unit
from netcase import BessSpec

SPEC = BessSpec()


@pytest.mark.parametrize("delta_f, expected", [
    (0.0, 0.0),
    (-0.01, 0.1),
    (0.01, -0.1),
    (-0.5, 1.0),
    (0.5, -1.0),
])
def test_reference_power(delta_f, expected):
    assert reference_power(delta_f, SPEC) == pytest.approx(expected)


@pytest.mark.parametrize("p_ref, soc, expected", [
    (0.1, 0.20, 0.0),
    (-0.1, 0.80, 0.0),
    (0.1, 0.50, 0.1),
    (-0.1, 0.50, -0.1),
    (-0.1, 0.20, -0.1),
    (0.1, 0.80, 0.1),
    (0.0, 0.50, 0.0),
])
def test_gate_reference(p_ref, soc, expected):
    assert gate_reference(p_ref, soc, SPEC) == expected


def test_initial_state():
    assert initial_state(SPEC) == BessState(p_es=0.0, soc=0.5)


def test_step_response_at_one_time_constant():
    state = BessState(0.0, 0.5)
    n = 8
    for _ in range(n):
        state = advance(state, 0.4, SPEC.t_es / n, SPEC)
    assert state.p_es == pytest.approx(0.4 * (1 - math.exp(-1)), abs=1e-9)


def test_constant_discharge_soc_drop():
    assert SPEC.e_pu_s == pytest.approx(360.0)
    state = BessState(0.5, 0.5)
    for _ in range(200):
        state = advance(state, 0.5, 0.005, SPEC)
    assert state.p_es == pytest.approx(0.5)
    assert state.soc - 0.5 == pytest.approx(-0.5 / 360.0, rel=1e-9)


def test_free_decay_is_geometric():
    dt = 0.005
    state = BessState(0.8, 0.5)
    nxt = advance(state, 0.0, dt, SPEC)
    assert nxt.p_es == pytest.approx(0.8 * math.exp(-dt / SPEC.t_es), rel=1e-12)


def test_two_half_steps_equal_one_full_step():
    start = BessState(-0.3, 0.5)
    one = advance(start, 0.7, 0.01, SPEC)
    two = advance(advance(start, 0.7, 0.005, SPEC), 0.7, 0.005, SPEC)
    assert two.p_es == pytest.approx(one.p_es, abs=1e-12)


def test_soc_clamped_and_output_zeroed():
    spec = BessSpec(e_total=0.001)
    state = BessState(1.0, 0.2001)
    nxt = advance(state, 1.0, 0.01, spec)
    assert nxt == BessState(p_es=0.0, soc=spec.soc_min)


def test_nonpositive_dt_rejected():
    with pytest.raises(ValueError):
        advance(BessState(0.0, 0.5), 0.1, 0.0, SPEC)


def test_energy_bookkeeping():
    rng = np.random.default_rng(7)
    dt = 0.005
    state = initial_state(SPEC)
    powers = [state.p_es]
    for delta_f in rng.uniform(-0.02, 0.02, 1000):
        state = step_unit(state, delta_f, dt, SPEC)
        powers.append(state.p_es)
    energy = trapezoid(powers, dx=dt)
    assert abs((SPEC.soc_init - state.soc) * SPEC.e_pu_s - energy) < 1e-6


def test_soc_direction_follows_sign():
    state = BessState(0.0, 0.5)
    for delta_f in (-0.05, -0.05, 0.05, 0.05):
        nxt = step_unit(state, delta_f, 0.005, SPEC)
        if nxt.p_es > 0 and state.p_es >= 0:
            assert nxt.soc <= state.soc
        if nxt.p_es < 0 and state.p_es <= 0:
            assert nxt.soc >= state.soc
        state = nxt


def test_soc_stays_in_bounds_under_adversarial_input():
    # a tiny battery so the bounds are hit within a few steps
    spec = BessSpec(e_total=0.0005)
    rng = np.random.default_rng(2024)
    for _ in range(10_000):
        state = initial_state(spec)
        dt = rng.uniform(0.001, 0.05)
        for delta_f in rng.uniform(-0.5, 0.5, 30) * rng.choice([0.01, 1.0]):
            state = step_unit(state, float(delta_f), dt, spec)
            assert spec.soc_min <= state.soc <= spec.soc_max
            assert abs(state.p_es) <= spec.p_max
