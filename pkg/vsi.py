"""Post-fault voltage criteria, contingency severity ranking and the placement index.

Voltage deviation D = |v - v0| / v0 per bus and sample. A contingency's
severity is the mean of D over every violating sample (zeros elsewhere); a
placement's score is the severity-weighted mean over buses of the peak voltage
recovery per unit of installed droop gain.
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from dynsim import Contingency, SimConfig, SimulationError, Trajectory, simulate
from netcase import NetworkCase
from powerflow import PowerFlowSolution, solve_power_flow

logger = logging.getLogger(__name__)

_T_EPS = 1e-9


class StructuralError(ValueError):
    """Trajectories and ranked contingencies do not line up."""


@dataclass(frozen=True)
class CriteriaConfig:
    dip_limit_load: float = 0.25
    dip_limit_gen: float = 0.30
    overshoot_duration_limit: float = 20.0  # cycles
    overshoot_duration_threshold: float = 0.20
    post_transient_deviation: float = 0.05
    post_transient_window: float = 1.0  # seconds at the tail

    def __post_init__(self):
        for name in ("dip_limit_load", "dip_limit_gen", "overshoot_duration_threshold",
                     "post_transient_deviation"):
            value = getattr(self, name)
            if not 0 < value < 1:
                raise ValueError(f"CriteriaConfig.{name} must be in (0, 1), got {value}")
        if self.overshoot_duration_limit <= 0 or self.post_transient_window <= 0:
            raise ValueError("CriteriaConfig: overshoot_duration_limit and post_transient_window must be > 0")


@dataclass
class ViolationMask:
    violated: np.ndarray  # T x N booleans
    times: np.ndarray
    bus_ids: List[int]

    @property
    def violated_samples(self) -> np.ndarray:
        return self.violated.sum(axis=0)

    @property
    def total_violated_samples(self) -> int:
        return int(self.violated.sum())

    def violated_buses(self) -> List[int]:
        return [b for b, n in zip(self.bus_ids, self.violated_samples) if n > 0]

    def first_violation_time(self, bus_id: int) -> Optional[float]:
        rows = np.flatnonzero(self.violated[:, self.bus_ids.index(bus_id)])
        return float(self.times[rows[0]]) if rows.size else None

    def summary_rows(self) -> List[Dict]:
        """Rows for the `bus,violated_samples,first_violation_time` report."""
        return [
            {
                "bus": bus_id,
                "violated_samples": int(count),
                "first_violation_time": self.first_violation_time(bus_id),
            }
            for bus_id, count in zip(self.bus_ids, self.violated_samples)
        ]


@dataclass
class ContingencyResult:
    contingency: Contingency
    si: float
    baseline: Trajectory
    mask: Optional[ViolationMask] = None

    @property
    def fault_bus(self) -> int:
        return self.contingency.fault_bus


def voltage_variation(v_t, v0):
    """|v_t - v0| / v0, elementwise."""
    v0 = np.asarray(v0, dtype=float)
    if np.any(v0 <= 0):
        raise ValueError("voltage_variation requires v0 > 0")
    d = np.abs(np.asarray(v_t, dtype=float) - v0) / v0
    return float(d) if d.ndim == 0 else d


def _runs(flags: np.ndarray):
    """Start/stop indices of contiguous True runs in a 1-D boolean array."""
    padded = np.concatenate([[0], flags.astype(np.int8), [0]])
    edges = np.flatnonzero(np.diff(padded))
    return zip(edges[0::2], edges[1::2])


def check_criteria(traj: Trajectory, v0, config: CriteriaConfig, case: NetworkCase) -> ViolationMask:
    """Mark every (sample, bus) where a post-fault voltage rule fires."""
    v = traj.v_mag
    v0 = np.asarray(v0, dtype=float)
    if v0.shape != (v.shape[1],):
        raise StructuralError(f"baseline has {v0.shape} entries for {v.shape[1]} buses")
    d = voltage_variation(v, v0)
    times = traj.times

    evaluated = np.ones(len(times), dtype=bool)
    if traj.contingency is not None:
        evaluated = times >= traj.contingency.t_clear - _T_EPS
    is_gen = np.array([case.bus(b).is_generator_bus for b in traj.bus_ids])

    limits = np.where(is_gen, config.dip_limit_gen, config.dip_limit_load)
    violated = (d > limits) & evaluated[:, None]

    # sustained overshoot, load buses only
    dt = traj.dt
    limit_s = config.overshoot_duration_limit / case.nominal_hz
    over = ((v - v0) / v0 >= config.overshoot_duration_threshold) & evaluated[:, None]
    for j in np.flatnonzero(~is_gen):
        for start, stop in _runs(over[:, j]):
            if (stop - start) * dt > limit_s:
                violated[start:stop, j] = True

    window = (times >= times[-1] - config.post_transient_window - _T_EPS) & evaluated
    if window.any():
        drifting = np.any(d[window] > config.post_transient_deviation, axis=0)
        violated[np.ix_(window, drifting)] = True

    return ViolationMask(violated=violated, times=times, bus_ids=list(traj.bus_ids))


def severity_index(traj: Trajectory, v0, mask: ViolationMask) -> float:
    if mask.violated.shape != traj.v_mag.shape:
        raise StructuralError("violation mask does not match the trajectory")
    d = voltage_variation(traj.v_mag, v0)
    return float(np.mean(np.where(mask.violated, d, 0.0)))


# ------------------------ Ranking ------------------------
def build_bus_fault_sweep(case: NetworkCase, buses: Union[str, Sequence[int]] = "all",
                          t_apply: float = 0.0, duration: float = 0.1,
                          fault_admittance: float = 1e4) -> List[Contingency]:
    """One bolted fault per listed bus ("all" = every bus, ascending)."""
    if buses == "all":
        buses = case.bus_ids
    buses = list(buses)
    if not buses:
        raise ValueError("contingency sweep is empty")
    index = case.bus_index
    for bus_id in buses:
        if bus_id not in index:
            raise ValueError(f"contingency bus {bus_id} does not exist")
    return [Contingency(b, t_apply, t_apply + duration, fault_admittance) for b in buses]


class BaselineEvaluator:
    """Picklable no-BESS run + criteria check for one contingency."""

    def __init__(self, case: NetworkCase, pf: PowerFlowSolution, criteria: CriteriaConfig,
                 sim_config: SimConfig):
        self.case = case
        self.pf = pf
        self.criteria = criteria
        self.sim_config = sim_config

    def __call__(self, contingency: Contingency) -> ContingencyResult:
        try:
            traj = simulate(self.case, None, contingency, self.sim_config, self.pf)
        except SimulationError as e:
            raise SimulationError(f"contingency {contingency.label}: {e}", e.time) from e
        mask = check_criteria(traj, self.pf.v_mag, self.criteria, self.case)
        si = severity_index(traj, self.pf.v_mag, mask)
        logger.info(f"Contingency {contingency.label}: SI={si:.6f}, "
                    f"{len(mask.violated_buses())} buses violated")
        return ContingencyResult(contingency=contingency, si=si, baseline=traj, mask=mask)


def rank_contingencies(case: NetworkCase, scenarios: Sequence[Contingency],
                       config: Optional[CriteriaConfig] = None,
                       sim_config: Optional[SimConfig] = None,
                       pf: Optional[PowerFlowSolution] = None,
                       workers: int = 1) -> List[ContingencyResult]:
    """Severity-descending results (ties by fault bus, then scenario order), baselines cached."""
    if not scenarios:
        raise ValueError("contingency set is empty")
    evaluate = BaselineEvaluator(case, pf or solve_power_flow(case),
                                 config or CriteriaConfig(), sim_config or SimConfig())
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(evaluate, scenarios))
    else:
        results = [evaluate(c) for c in scenarios]
    order = sorted(range(len(results)), key=lambda i: (-results[i].si, results[i].fault_bus, i))
    return [results[i] for i in order]


def ranking_rows(results: Sequence[ContingencyResult]) -> List[Dict]:
    return [{"fault_bus": r.fault_bus, "si": r.si} for r in results]


# ------------------------ Placement index ------------------------
def _check_aligned(new: Trajectory, old: Trajectory):
    if new.v_mag.shape != old.v_mag.shape:
        raise StructuralError(f"trajectory shapes differ: {new.v_mag.shape} vs {old.v_mag.shape}")


def vsi_sensitivity(new: Trajectory, old: Trajectory, j: int, total_gain: float) -> float:
    """Peak voltage recovery at column j per unit of droop gain (signed)."""
    if total_gain <= 0:
        raise ValueError("total_gain must be > 0")
    _check_aligned(new, old)
    return float(np.max(new.v_mag[:, j] - old.v_mag[:, j]) / total_gain)


def bus_sensitivities(new: Trajectory, old: Trajectory, total_gain: float) -> np.ndarray:
    """vsi_sensitivity for every bus column at once."""
    if total_gain <= 0:
        raise ValueError("total_gain must be > 0")
    _check_aligned(new, old)
    return np.max(new.v_mag - old.v_mag, axis=0) / total_gain


def vsi_placement(new_trajectories: Sequence[Trajectory], results: Sequence[ContingencyResult],
                  total_gain: float) -> float:
    """Sum over ranked contingencies of SI times the bus-averaged sensitivity."""
    if not results:
        raise StructuralError("at least one ranked contingency is required")
    if len(new_trajectories) != len(results):
        raise StructuralError(f"{len(new_trajectories)} trajectories for {len(results)} contingencies")
    total = 0.0
    for new, result in zip(new_trajectories, results):
        if new.contingency is not None and new.contingency != result.contingency:
            raise StructuralError(
                f"trajectory for {new.contingency.label} paired with {result.contingency.label}")
        total += result.si * float(np.mean(bus_sensitivities(new, result.baseline, total_gain)))
    return total
