"""End-to-end BESS placement study: ranking, CE/PSO placement, verification runs.

All artifacts land in the output directory. Every file except timing.json is
a deterministic function of the config and seed.
"""
import csv
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, fields, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from dynsim import Contingency, SimConfig, Trajectory, simulate, snapshot, trajectory_rows
from netcase import NetworkCase, candidate_buses, load_case
from optim import (BatchEvaluator, CEParams, CEState, Placement, PSOParams, PSOResult,
                   ce_optimize, ce_trace_rows, pso_optimize, pso_trace_rows)
from powerflow import PowerFlowSolution, solve_power_flow, total_losses
from vsi import (BaselineEvaluator, ContingencyResult, CriteriaConfig, build_bus_fault_sweep,
                 check_criteria, rank_contingencies, ranking_rows, vsi_placement)

logger = logging.getLogger(__name__)

PACKAGE_DIR = os.path.dirname(os.path.abspath(__file__))
DEFAULT_CASE = os.path.join(PACKAGE_DIR, "cases", "new_england_39.json")
DEFAULT_CONFIG = os.path.join(PACKAGE_DIR, "cases", "study_39.json")
DEFAULT_OUTPUT_DIR = "bess_placement_output"


class ConfigError(ValueError):
    """Study config is malformed or inconsistent."""


class StageError(RuntimeError):
    """A study stage failed; the original exception is the __cause__."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class ContingencySpec:
    buses: Union[str, Tuple[int, ...]] = "all"
    t_apply: float = 0.0
    duration: float = 0.1
    fault_admittance: float = 1e4


@dataclass(frozen=True)
class StudyConfig:
    case_path: str = DEFAULT_CASE
    contingencies: ContingencySpec = field(default_factory=ContingencySpec)
    criteria: CriteriaConfig = field(default_factory=CriteriaConfig)
    sim: SimConfig = field(default_factory=SimConfig)
    ce: CEParams = field(default_factory=CEParams)
    pso: PSOParams = field(default_factory=PSOParams)
    run_pso: bool = True
    top_k: int = 5
    n_es: int = 3
    output_dir: str = DEFAULT_OUTPUT_DIR
    seed: int = 0
    snapshot_time: float = 1.4
    overshoot_thresholds: Tuple[float, float] = (1.25, 1.20)
    workers: Optional[int] = None
    sweep_rho: Tuple[float, ...] = (0.2, 0.3, 0.5, 0.7)
    sweep_n_samples: Tuple[int, ...] = (10, 20, 40)
    verification_fault_bus: Optional[int] = 16
    match_budget: bool = True
    comparison_seeds: Tuple[int, ...] = tuple(range(10))

    @property
    def resolved_workers(self) -> int:
        return self.workers if self.workers is not None else (os.cpu_count() or 1)

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "StudyConfig":
        if not isinstance(data, dict):
            raise ConfigError("study config must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown study config keys: {unknown}")

        def section(key: str, factory, **extra):
            raw = data.get(key, {})
            if not isinstance(raw, dict):
                raise ConfigError(f"'{key}' must be an object")
            try:
                return factory(**raw, **extra)
            except TypeError as e:
                raise ConfigError(f"'{key}': {e}") from e
            except ValueError as e:
                raise ConfigError(f"'{key}': {e}") from e

        seed = data.get("seed", 0)
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigError("'seed' must be a non-negative integer")
        contingencies = section("contingencies", ContingencySpec)
        if contingencies.buses != "all":
            if not isinstance(contingencies.buses, list):
                raise ConfigError("'contingencies.buses' must be a list of bus ids or \"all\"")
            contingencies = replace(contingencies, buses=tuple(contingencies.buses))

        case_path = data.get("case_path", DEFAULT_CASE)
        if not os.path.isabs(case_path):
            case_path = os.path.normpath(os.path.join(base_dir, case_path))
        thresholds = data.get("overshoot_thresholds", [1.25, 1.20])
        if not isinstance(thresholds, list) or len(thresholds) != 2:
            raise ConfigError("'overshoot_thresholds' must be a list [upper, lower]")

        config = cls(
            case_path=case_path,
            contingencies=contingencies,
            criteria=section("criteria", CriteriaConfig),
            sim=section("sim", SimConfig),
            ce=_ce_params(section("ce", CEParams, seed=seed)),
            pso=section("pso", PSOParams, seed=seed),
            run_pso=bool(data.get("run_pso", True)),
            top_k=data.get("top_k", 5),
            n_es=data.get("n_es", 3),
            output_dir=data.get("output_dir", DEFAULT_OUTPUT_DIR),
            seed=seed,
            snapshot_time=float(data.get("snapshot_time", 1.4)),
            overshoot_thresholds=(float(thresholds[0]), float(thresholds[1])),
            workers=data.get("workers"),
            sweep_rho=tuple(data.get("sweep_rho", cls.sweep_rho)),
            sweep_n_samples=tuple(data.get("sweep_n_samples", cls.sweep_n_samples)),
            verification_fault_bus=data.get("verification_fault_bus", cls.verification_fault_bus),
            match_budget=data.get("match_budget", True),
            comparison_seeds=_seed_list(data.get("comparison_seeds", list(cls.comparison_seeds))),
        )
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str) -> "StudyConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: invalid JSON ({e.msg})") from e
        return cls.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))

    def with_overrides(self, case_path: Optional[str] = None, output_dir: Optional[str] = None,
                       seed: Optional[int] = None, workers: Optional[int] = None) -> "StudyConfig":
        config = self
        if case_path is not None:
            config = replace(config, case_path=case_path)
        if output_dir is not None:
            config = replace(config, output_dir=output_dir)
        if seed is not None:
            config = replace(config, seed=seed, ce=replace(config.ce, seed=seed),
                             pso=replace(config.pso, seed=seed))
        if workers is not None:
            config = replace(config, workers=workers)
        config.validate()
        return config

    def validate(self) -> None:
        if not isinstance(self.top_k, int) or self.top_k < 1:
            raise ConfigError("'top_k' must be an integer >= 1")
        if not isinstance(self.n_es, int) or self.n_es < 1:
            raise ConfigError("'n_es' must be an integer >= 1")
        if self.workers is not None and (not isinstance(self.workers, int) or self.workers < 1):
            raise ConfigError("'workers' must be an integer >= 1")
        if self.contingencies.buses != "all" and not self.contingencies.buses:
            raise ConfigError("contingency list is empty")
        if self.contingencies.duration <= 0 or self.contingencies.t_apply < 0:
            raise ConfigError("contingencies require t_apply >= 0 and duration > 0")
        if not 0 <= self.snapshot_time <= self.sim.t_end:
            raise ConfigError(f"'snapshot_time' must lie in [0, {self.sim.t_end}]")
        bus = self.verification_fault_bus
        if bus is not None and (isinstance(bus, bool) or not isinstance(bus, int)):
            raise ConfigError("'verification_fault_bus' must be a bus id or null")
        if not isinstance(self.match_budget, bool):
            raise ConfigError("'match_budget' must be true or false")
        if not self.comparison_seeds or any(
                isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in self.comparison_seeds):
            raise ConfigError("'comparison_seeds' must be a non-empty list of non-negative integers")
        if not os.path.isfile(self.case_path):
            raise ConfigError(f"case file not found: {self.case_path}")


def _seed_list(value) -> Tuple[int, ...]:
    if not isinstance(value, list):
        raise ConfigError("'comparison_seeds' must be a list of seeds")
    return tuple(value)


def _ce_params(params: CEParams) -> CEParams:
    if isinstance(params.p_init, list):
        params = replace(params, p_init=tuple(float(v) for v in params.p_init))
    return params


# ------------------------ Objective ------------------------
class PlacementObjective:
    """Severity-weighted voltage recovery of a placement over the cached top-K baselines."""

    def __init__(self, case: NetworkCase, pf: PowerFlowSolution, results: Sequence[ContingencyResult],
                 sim_config: SimConfig):
        self.case = case
        self.pf = pf
        self.results = list(results)
        self.sim_config = sim_config

    def trajectories(self, placement) -> List[Trajectory]:
        return [simulate(self.case, placement, r.contingency, self.sim_config, self.pf)
                for r in self.results]

    def total_gain(self, placement) -> float:
        return self.case.bess_template.k_es * len(placement.buses)

    def __call__(self, placement: Placement) -> float:
        return vsi_placement(self.trajectories(placement), self.results, self.total_gain(placement))


# ------------------------ Output helpers ------------------------
def write_csv(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, mode="w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


def write_dict_rows(path: str, rows: Sequence[Dict], fieldnames: Optional[Sequence[str]] = None) -> None:
    with open(path, mode="w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames or rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def write_json(path: str, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2)
        f.write("\n")


def write_trajectory(path: str, traj: Trajectory) -> None:
    header, rows = trajectory_rows(traj)
    write_csv(path, header, rows)


@contextmanager
def stage(name: str, timings: Optional[Dict[str, float]] = None):
    """Tag any failure with the stage name and record wall time."""
    start = time.perf_counter()
    logger.info(f"Stage '{name}' started")
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, f"{type(e).__name__}: {e}") from e
    finally:
        if timings is not None:
            timings[name] = time.perf_counter() - start
    logger.info(f"Stage '{name}' finished in {time.perf_counter() - start:.2f}s")


# ------------------------ Verification ------------------------
@dataclass
class VerificationRun:
    label: str
    buses: Tuple[int, ...]
    trajectory: Trajectory
    snapshot: np.ndarray
    violated_buses: List[int]
    violated_samples: int
    trace: List[Dict] = field(default_factory=list)


def verification_run(label: str, buses: Sequence[int], traj: Trajectory, case: NetworkCase,
                     pf: PowerFlowSolution, criteria: CriteriaConfig, snapshot_time: float,
                     trace: Optional[List[Dict]] = None) -> VerificationRun:
    mask = check_criteria(traj, pf.v_mag, criteria, case)
    return VerificationRun(label=label, buses=tuple(buses), trajectory=traj,
                           snapshot=snapshot(traj, snapshot_time),
                           violated_buses=mask.violated_buses(),
                           violated_samples=mask.total_violated_samples,
                           trace=list(trace or []))


def overshoot_counts(v: np.ndarray, thresholds: Tuple[float, float]) -> Tuple[int, int]:
    """Buses above the upper threshold, and between the thresholds (upper inclusive)."""
    upper, lower = thresholds
    return int(np.sum(v > upper)), int(np.sum((v <= upper) & (v > lower)))


def compare_report(ce_result: VerificationRun, pso_result: Optional[VerificationRun],
                   baseline: VerificationRun,
                   thresholds: Tuple[float, float] = (1.25, 1.20)) -> Dict:
    """Per-scenario overshoot counts at the snapshot instant plus the iteration curves."""
    scenarios = {}
    for run in (baseline, pso_result, ce_result):
        if run is None:
            continue
        above, between = overshoot_counts(run.snapshot, thresholds)
        scenarios[run.label] = {
            "siting": list(run.buses),
            "above_upper": above,
            "between": between,
            "violated_buses": len(run.violated_buses),
            "violated_samples": run.violated_samples,
        }
    return {
        "thresholds": list(thresholds),
        "scenarios": scenarios,
        "curves": {
            run.label: [row["best_value"] for row in run.trace]
            for run in (ce_result, pso_result) if run is not None
        },
    }


# ------------------------ Study ------------------------
def _summary(state: Union[CEState, PSOResult], iterations: int, converged: Optional[bool]) -> Dict:
    return {
        "siting": list(state.best_placement.buses),
        "vsi": state.best_value,
        "iterations_to_convergence": state.iterations_to_convergence,
        "iterations": iterations,
        "converged": converged,
        "n_evaluations": state.n_evaluations,
    }


def _pso_summary(result: PSOResult, budget: Optional[int]) -> Dict:
    summary = _summary(result, len(result.trace), None)
    summary["evaluation_budget"] = budget
    return summary


def prepare(config: StudyConfig, timings: Dict[str, float]):
    """Load the case, solve the power flow and rank contingencies (stages shared by every study)."""
    with stage("powerflow", timings):
        case = load_case(config.case_path)
        pf = solve_power_flow(case)
    with stage("ranking", timings):
        c = config.contingencies
        scenarios = build_bus_fault_sweep(case, c.buses, c.t_apply, c.duration, c.fault_admittance)
        ranked = rank_contingencies(case, scenarios, config.criteria, config.sim, pf,
                                    workers=config.resolved_workers)
        write_dict_rows(os.path.join(config.output_dir, "ranking.csv"), ranking_rows(ranked))
    return case, pf, ranked


def verification_result(config: StudyConfig, case: NetworkCase, pf: PowerFlowSolution,
                        ranked: Sequence[ContingencyResult]) -> ContingencyResult:
    """No-BESS result for the verification fault; the most severe one when no bus is configured."""
    bus = config.verification_fault_bus
    if bus is None:
        return ranked[0]
    for result in ranked:
        if result.fault_bus == bus:
            return result
    if bus not in case.bus_index:
        raise ConfigError(f"verification fault bus {bus} does not exist")
    c = config.contingencies
    contingency = Contingency(bus, c.t_apply, c.t_apply + c.duration, c.fault_admittance)
    return BaselineEvaluator(case, pf, config.criteria, config.sim)(contingency)


def run_ce(config: StudyConfig, objective: PlacementObjective, candidates: Sequence[int],
           timings: Dict[str, float]) -> CEState:
    with stage("ce", timings):
        with BatchEvaluator(objective, config.resolved_workers) as evaluator:
            state = ce_optimize(objective, config.ce, len(candidates), config.n_es, candidates, evaluator)
        header, rows = ce_trace_rows(state)
        write_csv(os.path.join(config.output_dir, "ce_trace.csv"), header, rows)
    return state


def run_pso(config: StudyConfig, objective: PlacementObjective, candidates: Sequence[int],
            timings: Dict[str, float], max_evaluations: Optional[int] = None) -> PSOResult:
    params = config.pso if max_evaluations is None else replace(config.pso, max_evaluations=max_evaluations)
    with stage("pso", timings):
        with BatchEvaluator(objective, config.resolved_workers) as evaluator:
            result = pso_optimize(objective, params, len(candidates), config.n_es, candidates, evaluator)
        header, rows = pso_trace_rows(result)
        write_csv(os.path.join(config.output_dir, "pso_trace.csv"), header, rows)
    return result


def run_placement_study(config: StudyConfig) -> Dict:
    """Run every stage and write ranking, traces, trajectories, snapshot and report files."""
    os.makedirs(config.output_dir, exist_ok=True)
    timings: Dict[str, float] = {}
    started = time.perf_counter()

    case, pf, ranked = prepare(config, timings)
    top = ranked[:config.top_k]
    logger.info(f"Top {len(top)} contingencies: {[r.fault_bus for r in top]}")
    candidates = candidate_buses(case)
    objective = PlacementObjective(case, pf, top, config.sim)

    ce_state = run_ce(config, objective, candidates, timings)
    budget = ce_state.n_evaluations if config.match_budget else None
    pso_result = run_pso(config, objective, candidates, timings, budget) if config.run_pso else None

    with stage("verification", timings):
        verify = verification_result(config, case, pf, ranked)
        scenarios = list(top)
        if not any(r is verify for r in top):
            scenarios.append(verify)
        at = next(i for i, r in enumerate(scenarios) if r is verify)
        logger.info(f"Verification contingency: {verify.contingency.label}")
        placements = [("no_bess", None, [])]
        if pso_result is not None:
            placements.append(("pso", pso_result.best_placement, pso_result.trace))
        placements.append(("ce", ce_state.best_placement, ce_state.trace))

        runs = {}
        for label, placement, trace in placements:
            if placement is None:
                trajectories = [r.baseline for r in scenarios]
            else:
                trajectories = [simulate(case, placement, r.contingency, config.sim, pf) for r in scenarios]
            for traj in trajectories:
                write_trajectory(os.path.join(
                    config.output_dir, f"trajectory_{traj.contingency.label}_{label}.csv"), traj)
            buses = placement.buses if placement is not None else ()
            runs[label] = verification_run(label, buses, trajectories[at], case, pf, config.criteria,
                                           config.snapshot_time, trace)

        snap_header = ["bus"] + [label for label, _, _ in placements]
        snap_rows = [[bus_id] + [float(runs[label].snapshot[i]) for label, _, _ in placements]
                     for i, bus_id in enumerate(case.bus_ids)]
        write_csv(os.path.join(config.output_dir, "snapshot.csv"), snap_header, snap_rows)
        comparison = compare_report(runs["ce"], runs.get("pso"), runs["no_bess"],
                                    config.overshoot_thresholds)

    report = {
        "case": os.path.basename(config.case_path),
        "seed": config.seed,
        "power_flow": {
            "iterations": pf.iterations,
            "max_mismatch": pf.max_mismatch,
            "losses_pu": total_losses(case, pf),
        },
        "ranking": ranking_rows(top),
        "verification_contingency": verify.contingency.label,
        "ce": _summary(ce_state, ce_state.iter, ce_state.converged),
        "pso": _pso_summary(pso_result, budget) if pso_result is not None else None,
        "comparison": comparison,
    }
    write_json(os.path.join(config.output_dir, "report.json"), report)
    timings["total"] = time.perf_counter() - started
    write_json(os.path.join(config.output_dir, "timing.json"), timings)
    return report


def run_ce_sweep(config: StudyConfig) -> List[Dict]:
    """CE over a grid of elite keeping rates and sample sizes; writes sweep.csv."""
    os.makedirs(config.output_dir, exist_ok=True)
    timings: Dict[str, float] = {}
    case, pf, ranked = prepare(config, timings)
    candidates = candidate_buses(case)
    objective = PlacementObjective(case, pf, ranked[:config.top_k], config.sim)

    rows = []
    with stage("sweep", timings):
        with BatchEvaluator(objective, config.resolved_workers) as evaluator:
            for n_samples in config.sweep_n_samples:
                for rho in config.sweep_rho:
                    params = replace(config.ce, rho=rho, n_samples=n_samples)
                    evaluator.new_run()
                    state = ce_optimize(objective, params, len(candidates), config.n_es, candidates, evaluator)
                    rows.append({
                        "rho": rho,
                        "n_samples": n_samples,
                        "siting": " ".join(str(b) for b in state.best_placement.buses),
                        "vsi": state.best_value,
                        "iterations_to_convergence": state.iterations_to_convergence,
                        "iterations": state.iter,
                        "n_evaluations": state.n_evaluations,
                    })
                    logger.info(f"Sweep rho={rho} N={n_samples}: {rows[-1]['siting']} "
                                f"VSI={state.best_value:.6g}")
        write_dict_rows(os.path.join(config.output_dir, "sweep.csv"), rows)
    write_json(os.path.join(config.output_dir, "timing.json"), timings)
    return rows



def run_seed_comparison(config: StudyConfig) -> Dict:
    """CE and PSO on the same objective for every comparison seed; writes seed_comparison.csv.

    With match_budget, each PSO run gets the distinct evaluation count its CE
    run used. A seed counts for CE when its VSI is at least the PSO one.
    """
    os.makedirs(config.output_dir, exist_ok=True)
    timings: Dict[str, float] = {}
    case, pf, ranked = prepare(config, timings)
    candidates = candidate_buses(case)
    objective = PlacementObjective(case, pf, ranked[:config.top_k], config.sim)

    rows = []
    with stage("comparison", timings):
        with BatchEvaluator(objective, config.resolved_workers) as evaluator:
            for seed in config.comparison_seeds:
                evaluator.new_run()
                ce = ce_optimize(objective, replace(config.ce, seed=seed), len(candidates), config.n_es,
                                 candidates, evaluator)
                budget = ce.n_evaluations if config.match_budget else None
                evaluator.new_run()
                pso = pso_optimize(objective, replace(config.pso, seed=seed, max_evaluations=budget),
                                   len(candidates), config.n_es, candidates, evaluator)
                rows.append({
                    "seed": seed,
                    "ce_siting": " ".join(str(b) for b in ce.best_placement.buses),
                    "ce_vsi": ce.best_value,
                    "ce_evaluations": ce.n_evaluations,
                    "pso_siting": " ".join(str(b) for b in pso.best_placement.buses),
                    "pso_vsi": pso.best_value,
                    "pso_iterations": len(pso.trace),
                    "pso_evaluations": pso.n_evaluations,
                    "ce_wins": ce.best_value >= pso.best_value,
                })
                logger.info(f"Seed {seed}: CE VSI={ce.best_value:.6g} ({ce.n_evaluations} evaluations), "
                            f"PSO VSI={pso.best_value:.6g} ({pso.n_evaluations} evaluations)")
        write_dict_rows(os.path.join(config.output_dir, "seed_comparison.csv"), rows)
    wins = sum(row["ce_wins"] for row in rows)
    summary = {"seeds": len(rows), "ce_wins": wins, "ce_win_fraction": wins / len(rows),
               "match_budget": config.match_budget, "rows": rows}
    write_json(os.path.join(config.output_dir, "seed_comparison.json"), summary)
    write_json(os.path.join(config.output_dir, "timing.json"), timings)
    return summary
