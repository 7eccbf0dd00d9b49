import os
import sys
import logging
import argparse
from dataclasses import replace

from dynsim import Contingency, InitializationError, SimulationError, simulate
from netcase import CaseSchemaError, CaseValidationError, candidate_buses, load_case
from optim import BatchEvaluator, InfeasibleSampling, ce_optimize, ce_trace_rows, pso_optimize, pso_trace_rows
from powerflow import PowerFlowDivergence, solution_rows, solve_power_flow, total_losses
from study import (DEFAULT_CONFIG, ConfigError, PlacementObjective, StageError, StudyConfig,
                   prepare, run_ce_sweep, run_placement_study, run_seed_comparison, stage, write_csv, write_dict_rows,
                   write_json, write_trajectory)
from vsi import StructuralError, check_criteria

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

VALIDATION_ERRORS = (CaseSchemaError, CaseValidationError, ConfigError, StructuralError,
                     InfeasibleSampling, FileNotFoundError, ValueError)
NUMERICAL_ERRORS = (PowerFlowDivergence, InitializationError, SimulationError)


# ------------------------ Logging ------------------------
def setup_logging(output_dir=".", log_filename="bess_placement.log", verbose=False):
    os.makedirs(output_dir, exist_ok=True)
    log_filepath = os.path.join(output_dir, log_filename)
    formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
    file_handler = logging.FileHandler(log_filepath, mode='a')  # Open in append mode
    file_handler.setFormatter(formatter)
    stream_handler = logging.StreamHandler()
    stream_handler.setFormatter(formatter)
    logger = logging.getLogger()
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.addHandler(file_handler)
    logger.addHandler(stream_handler)
    return log_filepath

def log_and_print(message, level='info'):
    if level == 'error':
        logging.error(message)
    elif level == 'warning':
        logging.warning(message)
    elif level == 'success':
        logging.info(f"SUCCESS: {message}")
    else:
        logging.info(message)

def exit_code_for(error):
    """Map an exception (or the cause of a stage failure) to the process exit code."""
    cause = error.__cause__ if isinstance(error, StageError) and error.__cause__ is not None else error
    if isinstance(cause, NUMERICAL_ERRORS):
        return EXIT_NUMERICAL
    if isinstance(cause, VALIDATION_ERRORS):
        return EXIT_VALIDATION
    return 1

# ------------------------ Subcommands ------------------------
def cmd_powerflow(config, args):
    case = load_case(config.case_path)
    pf = solve_power_flow(case)
    output = os.path.join(config.output_dir, "powerflow.csv")
    write_dict_rows(output, solution_rows(case, pf))
    log_and_print(f"Power flow converged in {pf.iterations} iterations, "
                  f"losses {total_losses(case, pf) * case.system_mva_base:.2f} MW. Written to {output}", 'success')

def _contingency(config, args):
    c = config.contingencies
    return Contingency(args.fault_bus, c.t_apply, c.t_apply + c.duration, c.fault_admittance)

def cmd_simulate(config, args):
    case = load_case(config.case_path)
    contingency = _contingency(config, args)
    traj = simulate(case, args.bess, contingency, config.sim)
    output = os.path.join(config.output_dir, f"trajectory_{contingency.label}.csv")
    write_trajectory(output, traj)
    log_and_print(f"Simulated {contingency.label} with BESS at {args.bess or 'none'}. Written to {output}", 'success')

def cmd_check(config, args):
    case = load_case(config.case_path)
    pf = solve_power_flow(case)
    contingency = _contingency(config, args)
    traj = simulate(case, args.bess, contingency, config.sim, pf)
    mask = check_criteria(traj, pf.v_mag, config.criteria, case)
    output = os.path.join(config.output_dir, f"violations_{contingency.label}.csv")
    write_dict_rows(output, mask.summary_rows())
    violated = mask.violated_buses()
    if violated:
        log_and_print(f"{len(violated)} buses violate the voltage criteria: {violated}", 'warning')
    else:
        log_and_print("No voltage criteria violations.", 'success')

def cmd_rank(config, args):
    _, _, ranked = prepare(config, {})
    for result in ranked[:config.top_k]:
        log_and_print(f"Fault at bus {result.fault_bus}: SI={result.si:.6f}")
    log_and_print(f"Ranking of {len(ranked)} contingencies written to "
                  f"{os.path.join(config.output_dir, 'ranking.csv')}", 'success')

def cmd_place(config, args):
    timings = {}
    case, pf, ranked = prepare(config, timings)
    candidates = candidate_buses(case)
    objective = PlacementObjective(case, pf, ranked[:config.top_k], config.sim)
    with stage(args.method, timings):
        with BatchEvaluator(objective, config.resolved_workers) as evaluator:
            if args.method == "ce":
                result = ce_optimize(objective, config.ce, len(candidates), config.n_es, candidates, evaluator)
                header, rows = ce_trace_rows(result)
            else:
                result = pso_optimize(objective, config.pso, len(candidates), config.n_es, candidates, evaluator)
                header, rows = pso_trace_rows(result)
    write_csv(os.path.join(config.output_dir, f"{args.method}_trace.csv"), header, rows)
    write_json(os.path.join(config.output_dir, f"placement_{args.method}.json"), {
        "method": args.method,
        "siting": list(result.best_placement.buses),
        "vsi": result.best_value,
        "iterations_to_convergence": result.iterations_to_convergence,
        "n_evaluations": result.n_evaluations,
    })
    log_and_print(f"{args.method.upper()} placement {list(result.best_placement.buses)} "
                  f"with VSI {result.best_value:.6g}", 'success')

def cmd_study(config, args):
    report = run_placement_study(config)
    log_and_print(f"CE placement {report['ce']['siting']} VSI {report['ce']['vsi']:.6g} "
                  f"(found at iteration {report['ce']['iterations_to_convergence']})", 'success')
    if report["pso"] is not None:
        log_and_print(f"PSO placement {report['pso']['siting']} VSI {report['pso']['vsi']:.6g} "
                      f"(found at iteration {report['pso']['iterations_to_convergence']})", 'success')
    for label, counts in report["comparison"]["scenarios"].items():
        log_and_print(f"{label}: {counts['above_upper']} buses above, {counts['between']} between "
                      f"the overshoot thresholds; {counts['violated_buses']} buses violate the criteria")

def cmd_sweep(config, args):
    rows = run_ce_sweep(config)
    best = max(rows, key=lambda r: r["vsi"])
    log_and_print(f"Sweep of {len(rows)} settings done; best VSI {best['vsi']:.6g} at "
                  f"rho={best['rho']}, N={best['n_samples']}", 'success')

def cmd_compare(config, args):
    if args.seeds:
        config = replace(config, comparison_seeds=tuple(args.seeds))
        config.validate()
    if args.no_match_budget:
        config = replace(config, match_budget=False)
    summary = run_seed_comparison(config)
    budget = "matched" if summary["match_budget"] else "independent"
    log_and_print(f"CE reached at least the PSO VSI on {summary['ce_wins']} of {summary['seeds']} seeds "
                  f"({budget} evaluation budgets)", 'success')

COMMANDS = {
    "powerflow": cmd_powerflow,
    "simulate": cmd_simulate,
    "check": cmd_check,
    "rank": cmd_rank,
    "place": cmd_place,
    "study": cmd_study,
    "sweep": cmd_sweep,
    "compare": cmd_compare,
}

# ------------------------ Main ------------------------
def parse_arguments(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_CONFIG, help="Path to the study config JSON")
    common.add_argument("--case", help="Case file; overrides the config's case_path")
    common.add_argument("--out", help="Output directory; overrides the config's output_dir")
    common.add_argument("--seed", type=int, help="RNG seed for the optimizers")
    common.add_argument("--workers", type=int, help="Worker processes (default: available CPUs)")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    parser = argparse.ArgumentParser(description="Place BESS units to improve post-fault voltage recovery")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("powerflow", parents=[common], help="Solve the pre-fault power flow")
    for name, text in (("simulate", "Simulate one bus fault"), ("check", "Check voltage criteria for one bus fault")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--fault-bus", type=int, required=True, help="Faulted bus id")
        p.add_argument("--bess", type=int, nargs="*", default=[], help="Bus ids hosting a BESS unit")
    sub.add_parser("rank", parents=[common], help="Rank contingencies by severity without BESS")
    place = sub.add_parser("place", parents=[common], help="Optimize the BESS placement")
    place.add_argument("--method", choices=["ce", "pso"], default="ce", help="Optimizer")
    sub.add_parser("study", parents=[common], help="Run the full placement study")
    sub.add_parser("sweep", parents=[common], help="CE sensitivity sweep over rho and sample size")
    compare = sub.add_parser("compare", parents=[common], help="CE against PSO over several seeds")
    compare.add_argument("--seeds", type=int, nargs="+", help="Seeds to compare; overrides comparison_seeds")
    compare.add_argument("--no-match-budget", action="store_true",
                         help="Let PSO run all its iterations instead of the CE evaluation count")
    return parser.parse_args(argv)

def main(argv=None):
    args = parse_arguments(argv)
    try:
        config = StudyConfig.from_file(args.config).with_overrides(
            case_path=args.case, output_dir=args.out, seed=args.seed, workers=args.workers)
    except (ConfigError, FileNotFoundError) as e:
        setup_logging(args.out or ".", verbose=args.verbose)
        log_and_print(f"Invalid configuration: {e}", 'error')
        return EXIT_VALIDATION

    setup_logging(config.output_dir, verbose=args.verbose)
    log_and_print(f"Running '{args.command}' with case {config.case_path} "
                  f"(seed {config.seed}, {config.resolved_workers} workers)")
    try:
        COMMANDS[args.command](config, args)
    except Exception as e:
        log_and_print(f"{args.command} failed: {e}", 'error')
        return exit_code_for(e)
    return EXIT_OK

if __name__ == "__main__":
    sys.exit(main())
