"""BESS active-power model: frequency droop reference, SOC gating, converter lag, SOC bookkeeping.

Sign convention: positive p_es discharges the battery (SOC falls).
"""
import math
from dataclasses import dataclass

from netcase import BessSpec


@dataclass(frozen=True)
class BessState:
    p_es: float
    soc: float


def initial_state(spec: BessSpec) -> BessState:
    return BessState(p_es=0.0, soc=spec.soc_init)


def _clamp(value: float, low: float, high: float) -> float:
    return min(max(value, low), high)


def reference_power(delta_f: float, spec: BessSpec) -> float:
    """Droop reference -k_es * delta_f, limited to +/- p_max."""
    return _clamp(-spec.k_es * delta_f, -spec.p_max, spec.p_max)


def gate_reference(p_ref: float, soc: float, spec: BessSpec) -> float:
    """Pass p_ref only while the SOC leaves room in that direction, else 0."""
    if p_ref > 0 and soc > spec.soc_min:
        return p_ref
    if p_ref < 0 and soc < spec.soc_max:
        return p_ref
    return 0.0


def advance(state: BessState, p_ref_gated: float, dt: float, spec: BessSpec) -> BessState:
    """One step of the exact first-order lag plus trapezoidal SOC integration.

    SOC hitting a bound is clamped and the output is zeroed for the next gate
    evaluation.
    """
    if dt <= 0:
        raise ValueError("dt must be > 0")
    decay = math.exp(-dt / spec.t_es)
    p_next = p_ref_gated + (state.p_es - p_ref_gated) * decay
    p_next = _clamp(p_next, -spec.p_max, spec.p_max)
    soc_next = state.soc - 0.5 * (state.p_es + p_next) * dt / spec.e_pu_s
    if soc_next <= spec.soc_min or soc_next >= spec.soc_max:
        return BessState(p_es=0.0, soc=_clamp(soc_next, spec.soc_min, spec.soc_max))
    return BessState(p_es=p_next, soc=soc_next)


def step_unit(state: BessState, delta_f: float, dt: float, spec: BessSpec) -> BessState:
    """Droop, gate and lag chained for one controller step."""
    p_ref = reference_power(delta_f, spec)
    return advance(state, gate_reference(p_ref, state.soc, spec), dt, spec)
