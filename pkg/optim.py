"""Cardinality-constrained placement search: cross-entropy with a PSO baseline.

A placement is a binary vector over the candidate buses with exactly n_es
ones. Objective values are maximised. Evaluations go through BatchEvaluator,
which deduplicates placements over a whole run and can fan a batch out to a
process pool without changing results.
"""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


class InfeasibleSampling(ValueError):
    """Fewer positive weights than units to place."""


@dataclass(frozen=True)
class Placement:
    z: Tuple[int, ...]
    candidates: Tuple[int, ...]

    def __post_init__(self):
        if len(self.z) != len(self.candidates):
            raise ValueError(f"placement has {len(self.z)} entries for {len(self.candidates)} candidates")
        if any(v not in (0, 1) for v in self.z):
            raise ValueError("placement vector must be binary")

    @classmethod
    def from_indices(cls, indices: Sequence[int], candidates: Sequence[int]) -> "Placement":
        z = [0] * len(candidates)
        for i in indices:
            z[int(i)] = 1
        return cls(tuple(z), tuple(candidates))

    @property
    def buses(self) -> Tuple[int, ...]:
        return tuple(c for c, v in zip(self.candidates, self.z) if v)

    @property
    def n_es(self) -> int:
        return sum(self.z)


@dataclass(frozen=True)
class CEParams:
    rho: float = 0.5
    alpha: float = 0.7
    n_samples: int = 20
    max_iter: int = 10
    p_init: Optional[Tuple[float, ...]] = None
    convergence_eps: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("CEParams.rho must be in (0, 1)")
        if not 0 < self.alpha <= 1:
            raise ValueError("CEParams.alpha must be in (0, 1]")
        if self.n_samples < 2 or self.max_iter < 1:
            raise ValueError("CEParams requires n_samples >= 2 and max_iter >= 1")
        if self.convergence_eps <= 0:
            raise ValueError("CEParams.convergence_eps must be > 0")

    @property
    def n_elite(self) -> int:
        return max(1, math.ceil(self.rho * self.n_samples - 1e-12))


@dataclass
class CEState:
    p: np.ndarray
    gamma: float = float("nan")
    iter: int = 0
    best_placement: Optional[Placement] = None
    best_value: float = float("-inf")
    converged: bool = False
    iterations_to_convergence: int = 0
    n_evaluations: int = 0
    trace: List[Dict] = field(default_factory=list)


@dataclass(frozen=True)
class PSOParams:
    swarm_size: int = 30
    max_iter: int = 20
    inertia: float = 0.72
    cognitive: float = 1.49
    social: float = 1.49
    v_max: float = 0.5
    seed: int = 0
    max_evaluations: Optional[int] = None

    def __post_init__(self):
        # a single particle is allowed and degenerates to a perturbation search
        if self.swarm_size < 1 or self.max_iter < 1:
            raise ValueError("PSOParams requires swarm_size >= 1 and max_iter >= 1")
        if self.v_max <= 0:
            raise ValueError("PSOParams.v_max must be > 0")
        if self.max_evaluations is not None and self.max_evaluations < 1:
            raise ValueError("PSOParams.max_evaluations must be >= 1")


@dataclass
class PSOResult:
    best_placement: Placement
    best_value: float
    iterations_to_convergence: int
    n_evaluations: int
    trace: List[Dict] = field(default_factory=list)


# ------------------------ Batch evaluation ------------------------
_worker_objective = None


def _install_objective(objective):
    global _worker_objective
    _worker_objective = objective


def _safe_call(objective, placement: Placement) -> Tuple[Optional[float], Optional[str]]:
    try:
        value = float(objective(placement))
    except Exception as e:
        return None, f"{type(e).__name__}: {e}"
    if not math.isfinite(value):
        return None, f"non-finite objective {value}"
    return value, None


def _worker_call(placement: Placement):
    return _safe_call(_worker_objective, placement)


class BatchEvaluator:
    """Order-preserving, memoised batch evaluation (serial when workers <= 1)."""

    def __init__(self, objective: Callable[[Placement], float], workers: int = 1):
        self.objective = objective
        self.workers = workers
        self.cache: Dict[Placement, Optional[float]] = {}
        self._requested = set()
        self._pool: Optional[ProcessPoolExecutor] = None

    def __enter__(self):
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(max_workers=self.workers, initializer=_install_objective,
                                             initargs=(self.objective,))
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    @property
    def n_evaluations(self) -> int:
        """Distinct placements requested since the last new_run()."""
        return len(self._requested)

    def new_run(self):
        """Restart the evaluation count; memoised values are kept."""
        self._requested = set()

    def evaluate(self, placements: Sequence[Placement]) -> List[float]:
        self._requested.update(placements)
        pending = list(dict.fromkeys(p for p in placements if p not in self.cache))
        if self._pool is not None and len(pending) > 1:
            outcomes = list(self._pool.map(_worker_call, pending))
        else:
            outcomes = [_safe_call(self.objective, p) for p in pending]
        for placement, (value, error) in zip(pending, outcomes):
            if error is not None:
                logger.warning(f"Objective failed for placement {placement.buses}: {error}")
            self.cache[placement] = value

        values = [self.cache[p] for p in placements]
        if any(v is None for v in values):
            finite = [v for v in self.cache.values() if v is not None]
            penalty = (min(finite) if finite else 0.0) - 1.0
            values = [penalty if v is None else v for v in values]
        return values


# ------------------------ Cross-entropy ------------------------
def bernoulli_pdf(x, p) -> float:
    x = np.asarray(x)
    p = np.asarray(p, dtype=float)
    if x.shape != p.shape:
        raise ValueError("x and p must have equal length")
    return float(np.prod(np.where(x == 1, p, 1.0 - p)))


MAX_REDRAWS = 64


def _sampling_weights(p, n_es: int) -> np.ndarray:
    weights = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    if np.count_nonzero(weights > 0) < n_es:
        raise InfeasibleSampling(
            f"only {np.count_nonzero(weights > 0)} positive weights for {n_es} units")
    return weights


def _draw(weights: np.ndarray, n_es: int, u: np.ndarray) -> np.ndarray:
    """Indices of the n_es largest keys log(u) / w, one row per row of u.

    Taking the largest keys has the same law as n_es successive weighted
    draws without replacement.
    """
    positive = weights > 0
    with np.errstate(divide="ignore"):
        keys = np.where(positive, np.log(u) / np.where(positive, weights, 1.0), -np.inf)
    return np.argsort(-keys, axis=-1, kind="stable")[..., :n_es]


def sample_placement(p, n_es: int, rng: np.random.Generator,
                     candidates: Optional[Sequence[int]] = None) -> Placement:
    """Draw n_es distinct indices by sequential weighted sampling without replacement."""
    weights = _sampling_weights(p, n_es)
    if candidates is None:
        candidates = range(len(weights))
    return Placement.from_indices(_draw(weights, n_es, rng.random(len(weights))), tuple(candidates))


def stratified_uniforms(n_samples: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """An (n_samples, m) table of uniforms, stratified per column across the rows.

    Each column takes one value from every stratum [k/n, (k+1)/n). The top
    strata of the m columns are dealt out evenly over the rows. Every entry
    is still uniform on [0, 1).
    """
    top = rng.permutation(np.arange(m) % n_samples)
    strata = np.empty((n_samples, m), dtype=int)
    for j in range(m):
        others = rng.permutation(np.delete(np.arange(n_samples), top[j]))
        strata[top[j], j] = n_samples - 1
        strata[others, j] = np.arange(n_samples - 1)
    return (strata + rng.random((n_samples, m))) / n_samples


def sample_batch(p, n_es: int, n_samples: int, seed: int, iteration: int,
                 candidates: Optional[Sequence[int]] = None) -> List[Placement]:
    """The placements of one cross-entropy iteration.

    Sample i is a weighted draw keyed by row i of a stratified table seeded
    with (seed, iteration). A draw that repeats an earlier placement of the
    batch is redrawn from the stream (seed, iteration, i), at most
    MAX_REDRAWS times, so the batch is distinct whenever p leaves room.
    """
    weights = _sampling_weights(p, n_es)
    candidates = tuple(candidates) if candidates is not None else tuple(range(len(weights)))
    table = stratified_uniforms(n_samples, len(weights), np.random.default_rng([seed, iteration]))

    batch: List[Placement] = []
    seen = set()
    for i in range(n_samples):
        placement = Placement.from_indices(_draw(weights, n_es, table[i]), candidates)
        if placement in seen:
            rng = np.random.default_rng([seed, iteration, i])
            for row in _draw(weights, n_es, rng.random((MAX_REDRAWS, len(weights)))):
                placement = Placement.from_indices(row, candidates)
                if placement not in seen:
                    break
        seen.add(placement)
        batch.append(placement)
    return batch


def select_elite(scores, n_elite: int) -> np.ndarray:
    """Indices of the n_elite best scores, best first; lower index wins ties."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("scores are empty")
    if not 1 <= n_elite <= scores.size:
        raise ValueError(f"n_elite must be in [1, {scores.size}]")
    order = np.lexsort((np.arange(scores.size), -scores))
    return order[:n_elite]


def elite_threshold(scores, n_elite: int) -> float:
    """The (N - n_elite + 1)-th smallest score."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("scores are empty")
    if not 1 <= n_elite <= scores.size:
        raise ValueError(f"n_elite must be in [1, {scores.size}]")
    return float(np.sort(scores)[scores.size - n_elite])


def update_p(elite_matrix, previous_p, alpha: float) -> np.ndarray:
    elite = np.atleast_2d(np.asarray(elite_matrix, dtype=float))
    if elite.shape[0] < 1:
        raise ValueError("elite set is empty")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must be in (0, 1]")
    p_hat = elite.mean(axis=0)
    return np.clip(alpha * p_hat + (1.0 - alpha) * np.asarray(previous_p, dtype=float), 0.0, 1.0)


def _polarized(p: np.ndarray, eps: float) -> bool:
    return float(np.max(np.abs(p - np.round(p)))) < eps


def ce_optimize(objective: Callable[[Placement], float], params: CEParams, m: int, n_es: int = 3,
                candidates: Optional[Sequence[int]] = None,
                evaluator: Optional[BatchEvaluator] = None) -> CEState:
    """Cross-entropy search over placements of n_es units among m candidates."""
    if not 1 <= n_es <= m:
        raise ValueError(f"need 1 <= n_es <= m, got n_es={n_es}, m={m}")
    candidates = tuple(candidates) if candidates is not None else tuple(range(m))
    if len(candidates) != m:
        raise ValueError(f"{len(candidates)} candidates for m={m}")
    evaluator = evaluator or BatchEvaluator(objective)

    if params.p_init is not None:
        p = np.asarray(params.p_init, dtype=float)
        if p.shape != (m,) or np.any((p < 0) | (p > 1)):
            raise ValueError("p_init must be a length-m vector in [0, 1]")
    else:
        p = np.full(m, n_es / m)
    state = CEState(p=p.copy())

    if _polarized(p, params.convergence_eps) and int(np.round(p).sum()) == n_es:
        placement = Placement.from_indices(np.flatnonzero(np.round(p)), candidates)
        state.best_placement = placement
        state.best_value = evaluator.evaluate([placement])[0]
        state.converged = True
        state.n_evaluations = evaluator.n_evaluations
        logger.info(f"CE start vector already converged on {placement.buses}")
        return state

    for it in range(1, params.max_iter + 1):
        samples = sample_batch(state.p, n_es, params.n_samples, params.seed, it, candidates)
        for s in samples:
            if s.n_es != n_es:
                raise InfeasibleSampling(f"sample places {s.n_es} units, expected {n_es}")
        scores = np.array(evaluator.evaluate(samples))

        elite = select_elite(scores, params.n_elite)
        state.gamma = elite_threshold(scores, params.n_elite)
        best = int(elite[0])
        if scores[best] > state.best_value:
            state.best_value = float(scores[best])
            state.best_placement = samples[best]
            state.iterations_to_convergence = it
        z = np.array([samples[i].z for i in elite])
        state.p = update_p(z, state.p, params.alpha)
        state.iter = it
        state.trace.append({"iter": it, "best_value": state.best_value, "gamma": state.gamma,
                            "p": state.p.copy()})
        logger.info(f"CE iteration {it}: best={state.best_value:.6g} gamma={state.gamma:.6g} "
                    f"placement={state.best_placement.buses}")
        if _polarized(state.p, params.convergence_eps):
            state.converged = True
            break

    state.n_evaluations = evaluator.n_evaluations
    return state


# ------------------------ Particle swarm ------------------------
def _decode(position: np.ndarray, n_es: int, candidates: Tuple[int, ...]) -> Placement:
    return Placement.from_indices(np.argsort(-position, kind="stable")[:n_es], candidates)


def pso_optimize(objective: Callable[[Placement], float], params: PSOParams, m: int, n_es: int = 3,
                 candidates: Optional[Sequence[int]] = None,
                 evaluator: Optional[BatchEvaluator] = None) -> PSOResult:
    """Global-best PSO on [0, 1]^m with rank decoding to n_es units.

    With params.max_evaluations set, no iteration starts that could push the
    distinct evaluation count past it; the initial swarm always runs.
    """
    if not 1 <= n_es <= m:
        raise ValueError(f"need 1 <= n_es <= m, got n_es={n_es}, m={m}")
    candidates = tuple(candidates) if candidates is not None else tuple(range(m))
    if len(candidates) != m:
        raise ValueError(f"{len(candidates)} candidates for m={m}")
    evaluator = evaluator or BatchEvaluator(objective)
    rng = np.random.default_rng(params.seed)
    size = params.swarm_size

    x = rng.random((size, m))
    v = rng.uniform(-params.v_max, params.v_max, (size, m))
    placements = [_decode(row, n_es, candidates) for row in x]
    scores = np.array(evaluator.evaluate(placements))
    pbest_x, pbest_val = x.copy(), scores.copy()
    g = int(np.argmax(scores))
    gbest_x = x[g].copy()
    best_value, best_placement, found_at = float(scores[g]), placements[g], 1
    trace = [{"iter": 1, "best_value": best_value}]
    logger.info(f"PSO iteration 1: best={best_value:.6g} placement={best_placement.buses}")

    for it in range(2, params.max_iter + 1):
        if params.max_evaluations is not None and evaluator.n_evaluations + size > params.max_evaluations:
            logger.info(f"PSO stops after iteration {it - 1}: {evaluator.n_evaluations} of "
                        f"{params.max_evaluations} evaluations used")
            break
        r1 = rng.random((size, m))
        r2 = rng.random((size, m))
        v = (params.inertia * v + params.cognitive * r1 * (pbest_x - x)
             + params.social * r2 * (gbest_x - x))
        v = np.clip(v, -params.v_max, params.v_max)
        x = np.clip(x + v, 0.0, 1.0)
        placements = [_decode(row, n_es, candidates) for row in x]
        scores = np.array(evaluator.evaluate(placements))

        improved = scores > pbest_val
        pbest_x[improved] = x[improved]
        pbest_val[improved] = scores[improved]
        g = int(np.argmax(scores))
        if scores[g] > best_value:
            best_value, best_placement, found_at = float(scores[g]), placements[g], it
            gbest_x = x[g].copy()
        trace.append({"iter": it, "best_value": best_value})
        logger.info(f"PSO iteration {it}: best={best_value:.6g} placement={best_placement.buses}")

    return PSOResult(best_placement=best_placement, best_value=best_value,
                     iterations_to_convergence=found_at, n_evaluations=evaluator.n_evaluations,
                     trace=trace)


# ------------------------ Trace rows ------------------------
def ce_trace_rows(state: CEState) -> Tuple[List[str], List[List[float]]]:
    """Header `iter,best_value,gamma,p_1..p_M` and one row per iteration."""
    header = ["iter", "best_value", "gamma"] + [f"p_{j + 1}" for j in range(len(state.p))]
    rows = [[row["iter"], row["best_value"], row["gamma"]] + list(row["p"]) for row in state.trace]
    return header, rows


def pso_trace_rows(result: PSOResult) -> Tuple[List[str], List[List[float]]]:
    return ["iter", "best_value"], [[row["iter"], row["best_value"]] for row in result.trace]
