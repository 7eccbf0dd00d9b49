"""AC power flow (full Newton, polar coordinates) for the pre-fault equilibrium."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix, diags, hstack, vstack
from scipy.sparse.linalg import spsolve

from netcase import NetworkCase

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 20


class PowerFlowDivergence(RuntimeError):
    """Newton iterations did not reach the tolerance; history holds max mismatch per iteration."""

    def __init__(self, message: str, history: List[float]):
        super().__init__(message)
        self.history = history


@dataclass
class PowerFlowSolution:
    bus_ids: List[int]
    v_mag: np.ndarray
    v_ang: np.ndarray
    p_gen: np.ndarray
    q_gen: np.ndarray
    converged: bool
    iterations: int
    max_mismatch: float
    history: List[float] = field(default_factory=list)

    @property
    def v(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def build_ybus(case: NetworkCase) -> csr_matrix:
    """Sparse complex bus admittance matrix with branch charging, taps and bus shunts."""
    n = case.n_bus
    index = case.bus_index
    rows, cols, vals = [], [], []
    for br in case.branches:
        if not br.in_service:
            continue
        f, t = index[br.from_bus], index[br.to_bus]
        ys = 1.0 / complex(br.r, br.x)
        bc = 1j * br.b_shunt / 2.0
        tap = br.tap_ratio
        rows += [f, t, f, t]
        cols += [f, t, t, f]
        vals += [(ys + bc) / tap ** 2, ys + bc, -ys / tap, -ys / tap]
    for i, bus in enumerate(case.buses):
        if bus.shunt_g or bus.shunt_b:
            rows.append(i)
            cols.append(i)
            vals.append(complex(bus.shunt_g, bus.shunt_b))
    # duplicates are summed by the COO -> CSR conversion
    return coo_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n)).tocsr()


def _dsbus_dv(ybus: csr_matrix, v: np.ndarray):
    ibus = ybus @ v
    diag_v = diags(v)
    diag_i = diags(ibus)
    diag_vnorm = diags(v / np.abs(v))
    ds_dvm = diag_v @ (ybus @ diag_vnorm).conj() + diag_i.conj() @ diag_vnorm
    ds_dva = 1j * diag_v @ (diag_i - ybus @ diag_v).conj()
    return csr_matrix(ds_dvm), csr_matrix(ds_dva)


def _scheduled_injection(case: NetworkCase) -> np.ndarray:
    sbus = np.array([-complex(b.p_load, b.q_load) for b in case.buses])
    index = case.bus_index
    for gen in case.generators:
        if case.bus(gen.bus).kind == "pv":
            sbus[index[gen.bus]] += gen.p_gen
    return sbus


def solve_power_flow(case: NetworkCase, tol: float = DEFAULT_TOL,
                     max_iter: int = DEFAULT_MAX_ITER) -> PowerFlowSolution:
    """Newton-Raphson power flow from a flat start; raises PowerFlowDivergence."""
    if tol <= 0:
        raise ValueError("tol must be > 0")
    ybus = build_ybus(case)
    sbus = _scheduled_injection(case)
    kinds = np.array([b.kind for b in case.buses])
    ref = np.flatnonzero(kinds == "slack")
    pv = np.flatnonzero(kinds == "pv")
    pq = np.flatnonzero(kinds == "pq")
    pvpq = np.r_[pv, pq]

    vm = np.ones(case.n_bus)
    va = np.zeros(case.n_bus)
    for i, bus in enumerate(case.buses):
        if bus.kind != "pq":
            vm[i] = bus.v_setpoint
    v = vm * np.exp(1j * va)

    def mismatch(v):
        mis = v * np.conj(ybus @ v) - sbus
        return np.r_[mis[pvpq].real, mis[pq].imag]

    f = mismatch(v)
    norm_f = float(np.linalg.norm(f, np.inf)) if f.size else 0.0
    history = [norm_f]
    iterations = 0
    npvpq = len(pvpq)
    while norm_f >= tol and iterations < max_iter:
        iterations += 1
        ds_dvm, ds_dva = _dsbus_dv(ybus, v)
        j11 = ds_dva[pvpq][:, pvpq].real
        j12 = ds_dvm[pvpq][:, pq].real
        j21 = ds_dva[pq][:, pvpq].imag
        j22 = ds_dvm[pq][:, pq].imag
        jac = vstack([hstack([j11, j12]), hstack([j21, j22])], format="csr")
        dx = -spsolve(jac, f)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        v = vm * np.exp(1j * va)
        f = mismatch(v)
        norm_f = float(np.linalg.norm(f, np.inf))
        history.append(norm_f)
        logger.debug(f"Newton iteration {iterations}: max mismatch {norm_f:.3e} pu")

    if not np.isfinite(norm_f) or norm_f >= tol:
        raise PowerFlowDivergence(
            f"Power flow did not converge in {iterations} iterations "
            f"(max mismatch {norm_f:.3e} pu, tol {tol:.1e})", history)

    # angles relative to the slack bus
    va = va - va[ref[0]]
    s_inj = v * np.conj(ybus @ v)
    index = case.bus_index
    p_gen = np.zeros(len(case.generators))
    q_gen = np.zeros(len(case.generators))
    for k, gen in enumerate(case.generators):
        i = index[gen.bus]
        bus = case.buses[i]
        p_gen[k] = s_inj[i].real + bus.p_load
        q_gen[k] = s_inj[i].imag + bus.q_load
    logger.info(f"Power flow converged in {iterations} iterations (max mismatch {norm_f:.3e} pu)")
    return PowerFlowSolution(
        bus_ids=case.bus_ids,
        v_mag=np.abs(v),
        v_ang=va,
        p_gen=p_gen,
        q_gen=q_gen,
        converged=True,
        iterations=iterations,
        max_mismatch=norm_f,
        history=history,
    )


def bus_injections(case: NetworkCase, solution: PowerFlowSolution) -> np.ndarray:
    """Complex net power injection per bus at the solved voltages."""
    v = solution.v
    return v * np.conj(build_ybus(case) @ v)


def total_losses(case: NetworkCase, solution: PowerFlowSolution) -> float:
    return float(bus_injections(case, solution).real.sum())


def solution_rows(case: NetworkCase, solution: PowerFlowSolution) -> List[Dict[str, float]]:
    """Rows for the `bus,v_mag,v_ang_deg,p_inj,q_inj` report."""
    s_inj = bus_injections(case, solution)
    return [
        {
            "bus": bus_id,
            "v_mag": float(solution.v_mag[i]),
            "v_ang_deg": float(np.degrees(solution.v_ang[i])),
            "p_inj": float(s_inj[i].real),
            "q_inj": float(s_inj[i].imag),
        }
        for i, bus_id in enumerate(solution.bus_ids)
    ]
