"""Fixed-step phasor-domain simulation of the faulted grid with BESS units.

Machines use the two-axis model (delta, omega, E'q, E'd) with a first-order
AVR; loads are constant impedance at the pre-fault voltage. Each step is an
implicit trapezoidal step: an Euler predictor, then corrector passes that
re-solve the network algebraics (one real 2N x 2N linear system, stator
saliency included exactly) until the machine states settle. BESS units
inject active power only.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import bess as bess_model
from bess import BessState
from netcase import NetworkCase
from powerflow import PowerFlowSolution, build_ybus, solve_power_flow

logger = logging.getLogger(__name__)

INIT_RESIDUAL_TOL = 1e-6
BESS_VOLTAGE_FLOOR = 0.5
CORRECTOR_TOL = 1e-8
MAX_CORRECTOR_ITER = 8
_T_EPS = 1e-9


class InitializationError(RuntimeError):
    """Machine states could not be placed at an equilibrium."""


class SimulationError(RuntimeError):
    """Simulation aborted; `time` is the simulated instant of the failure."""

    def __init__(self, message: str, time: float):
        super().__init__(message)
        self.time = time


@dataclass(frozen=True)
class Contingency:
    """Three-phase bus fault; t_apply == t_clear means no fault."""
    fault_bus: int
    t_apply: float = 0.0
    t_clear: float = 0.1
    fault_admittance: float = 1e4

    def __post_init__(self):
        if self.t_apply < 0 or self.t_clear < self.t_apply:
            raise ValueError(f"contingency at bus {self.fault_bus}: requires t_clear >= t_apply >= 0")
        if self.fault_admittance <= 0:
            raise ValueError(f"contingency at bus {self.fault_bus}: fault_admittance must be > 0")

    @property
    def label(self) -> str:
        return f"bus{self.fault_bus}"

    def active(self, t: float) -> bool:
        return self.t_apply - _T_EPS <= t < self.t_clear - _T_EPS


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.005
    t_end: float = 5.0
    freq_filter_tc: float = 0.05

    def __post_init__(self):
        if not 0 < self.dt < self.t_end:
            raise ValueError("SimConfig requires 0 < dt < t_end")
        if self.freq_filter_tc <= 0:
            raise ValueError("SimConfig requires freq_filter_tc > 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class GeneratorState:
    """Per-machine state vectors, ordered as case.generators."""
    delta: np.ndarray
    omega: np.ndarray
    eq_p: np.ndarray
    ed_p: np.ndarray
    efd: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.vstack([self.delta, self.omega, self.eq_p, self.ed_p, self.efd])

    @classmethod
    def from_stacked(cls, x: np.ndarray) -> "GeneratorState":
        return cls(*(row.copy() for row in x))


@dataclass
class NetworkSolution:
    v: np.ndarray
    i_d: np.ndarray
    i_q: np.ndarray
    p_e: np.ndarray
    v_t: np.ndarray


@dataclass
class SimState:
    t: float
    gen: GeneratorState
    net: NetworkSolution
    delta_f: np.ndarray
    bess: List[BessState]


@dataclass
class Trajectory:
    times: np.ndarray
    v_mag: np.ndarray
    delta_f: np.ndarray
    bess_p: np.ndarray
    bess_soc: np.ndarray
    bus_ids: List[int]
    bess_buses: List[int] = field(default_factory=list)
    contingency: Optional[Contingency] = None

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def column(self, bus_id: int) -> int:
        return self.bus_ids.index(bus_id)


# ------------------------ Frequency estimation ------------------------
class FrequencyEstimator:
    """Washout-filtered angle derivative, tc * dy/dt + y = dtheta/dt (backward Euler)."""

    def __init__(self, theta0, tc: float, nominal_hz: float):
        self.theta = np.array(theta0, dtype=float)
        self.y = np.zeros_like(self.theta)
        self.tc = tc
        self.omega_s = 2.0 * math.pi * nominal_hz

    def update(self, theta, dt: float) -> np.ndarray:
        d_theta = np.angle(np.exp(1j * (np.asarray(theta, dtype=float) - self.theta)))
        self.theta = self.theta + d_theta
        self.y = (self.tc * self.y + d_theta) / (self.tc + dt)
        return self.delta_f

    @property
    def delta_f(self) -> np.ndarray:
        return self.y / self.omega_s


def estimate_bus_frequency(theta_history, dt: float, freq_filter_tc: float,
                           nominal_hz: float = 60.0):
    """Per-unit frequency deviation at the last sample of an angle history (rows = samples)."""
    history = np.asarray(theta_history, dtype=float)
    if history.shape[0] < 2:
        raise ValueError("estimate_bus_frequency needs at least 2 samples")
    estimator = FrequencyEstimator(history[0], freq_filter_tc, nominal_hz)
    for theta in history[1:]:
        estimator.update(theta, dt)
    result = estimator.delta_f
    return float(result) if result.ndim == 0 else result


# ------------------------ Simulator ------------------------
def _placement_buses(placement) -> List[int]:
    if placement is None:
        return []
    if hasattr(placement, "buses"):
        return list(placement.buses)
    return list(placement)


def _real_form(y: np.ndarray) -> np.ndarray:
    g, b = y.real, y.imag
    return np.block([[g, -b], [b, g]])


class Simulator:
    """Holds the model constants and the current state of one simulation run."""

    def __init__(self, case: NetworkCase, pf: PowerFlowSolution, placement=None,
                 config: Optional[SimConfig] = None):
        if not pf.converged:
            raise InitializationError("power flow solution is not converged")
        self.case = case
        self.config = config or SimConfig()
        self.n = case.n_bus
        index = case.bus_index

        buses = _placement_buses(placement)
        if len(set(buses)) != len(buses):
            raise ValueError(f"placement has duplicate buses: {buses}")
        for bus_id in buses:
            if bus_id not in index:
                raise ValueError(f"placement bus {bus_id} does not exist")
        self.bess_buses = buses
        self.bess_idx = np.array([index[b] for b in buses], dtype=int)
        self.spec = case.bess_template

        gens = case.generators
        self.gen_idx = np.array([index[g.bus] for g in gens], dtype=int)
        self.h = np.array([g.h for g in gens])
        self.d = np.array([g.d for g in gens])
        self.xd = np.array([g.xd for g in gens])
        self.xq = np.array([g.xq for g in gens])
        self.xd_p = np.array([g.xd_p for g in gens])
        self.xq_p = np.array([g.xq_p for g in gens])
        self.td0_p = np.array([g.td0_p for g in gens])
        self.tq0_p = np.array([g.tq0_p for g in gens])
        self.ka = np.array([g.avr_gain for g in gens])
        self.ta = np.array([g.avr_time for g in gens])
        self.efd_min = np.array([g.efd_min for g in gens])
        self.efd_max = np.array([g.efd_max for g in gens])
        self.omega_s = 2.0 * math.pi * case.nominal_hz

        v0 = pf.v
        self.v0_mag = np.abs(v0)
        y = build_ybus(case).toarray()
        p_load = np.array([b.p_load for b in case.buses])
        q_load = np.array([b.q_load for b in case.buses])
        y[np.diag_indices(self.n)] += (p_load - 1j * q_load) / self.v0_mag ** 2
        self._y = y
        self._m_base = {False: _real_form(y)}
        self._fault_cache: Dict[Tuple[int, float], np.ndarray] = {}

        self.pm = np.zeros(len(gens))
        self.vref = np.zeros(len(gens))
        self.state = self._initial_state(pf)

    # ---- network algebra ----
    def _matrix(self, contingency: Optional[Contingency], faulted: bool) -> np.ndarray:
        if not faulted or contingency is None:
            return self._m_base[False]
        key = (contingency.fault_bus, contingency.fault_admittance)
        if key not in self._fault_cache:
            y = self._y.copy()
            k = self.case.bus_index[contingency.fault_bus]
            y[k, k] += -1j * contingency.fault_admittance
            self._fault_cache[key] = _real_form(y)
        return self._fault_cache[key]

    def _solve(self, x: np.ndarray, m_base: np.ndarray, bess_p: np.ndarray,
               v_guess: np.ndarray, t: float) -> NetworkSolution:
        delta, _, eq_p, ed_p, _ = x
        n, b = self.n, self.gen_idx
        a = delta - 0.5 * math.pi
        c, s = np.cos(a), np.sin(a)
        kd, kq = 1.0 / self.xd_p, 1.0 / self.xq_p

        m = m_base.copy()
        np.add.at(m, (b, b), -c * s * (kd - kq))
        np.add.at(m, (b, n + b), c * c * kd + s * s * kq)
        np.add.at(m, (n + b, b), -(s * s * kd + c * c * kq))
        np.add.at(m, (n + b, n + b), -c * s * (kq - kd))

        rhs = np.zeros(2 * n)
        np.add.at(rhs, b, c * eq_p * kd + s * ed_p * kq)
        np.add.at(rhs, n + b, s * eq_p * kd - c * ed_p * kq)
        if len(self.bess_idx):
            vb = v_guess[self.bess_idx]
            mag = np.abs(vb)
            vb = np.where(mag < BESS_VOLTAGE_FLOOR,
                          BESS_VOLTAGE_FLOOR * np.exp(1j * np.angle(vb)), vb)
            i_bess = bess_p / np.conj(vb)
            np.add.at(rhs, self.bess_idx, i_bess.real)
            np.add.at(rhs, n + self.bess_idx, i_bess.imag)

        try:
            sol = np.linalg.solve(m, rhs)
        except np.linalg.LinAlgError as e:
            raise SimulationError(f"network solve singular at t={t:.4f}s (islanded network?)", t) from e
        v = sol[:n] + 1j * sol[n:]
        vr, vi = sol[b], sol[n + b]
        v_d = c * vr + s * vi
        v_q = -s * vr + c * vi
        i_d = (eq_p - v_q) * kd
        i_q = (v_d - ed_p) * kq
        return NetworkSolution(v=v, i_d=i_d, i_q=i_q, p_e=v_d * i_d + v_q * i_q, v_t=np.abs(v[b]))

    # ---- machine dynamics ----
    def _derivatives(self, x: np.ndarray, net: NetworkSolution) -> np.ndarray:
        _, omega, eq_p, ed_p, efd = x
        f = np.empty_like(x)
        f[0] = self.omega_s * omega
        f[1] = (self.pm - net.p_e - self.d * omega) / (2.0 * self.h)
        f[2] = (-eq_p - (self.xd - self.xd_p) * net.i_d + efd) / self.td0_p
        f[3] = (-ed_p + (self.xq - self.xq_p) * net.i_q) / self.tq0_p
        d_efd = (-efd + self.ka * (self.vref - net.v_t)) / self.ta
        # non-windup limiter
        at_max = (efd >= self.efd_max) & (d_efd > 0)
        at_min = (efd <= self.efd_min) & (d_efd < 0)
        f[4] = np.where(at_max | at_min, 0.0, d_efd)
        return f

    def _limit(self, x: np.ndarray) -> np.ndarray:
        x[4] = np.clip(x[4], self.efd_min, self.efd_max)
        return x

    def _settle_ed(self, x: np.ndarray, bess_p: np.ndarray, v_guess: np.ndarray) -> np.ndarray:
        """E'd solving E'd = (xq - x'q) Iq exactly on the network (linear in E'd at fixed delta)."""
        m = self._m_base[False]
        base = self._solve(x, m, bess_p, v_guess, 0.0).i_q
        ng = x.shape[1]
        response = np.empty((ng, ng))
        for k in range(ng):
            probe = x.copy()
            probe[3, k] += 1.0
            response[:, k] = self._solve(probe, m, bess_p, v_guess, 0.0).i_q - base
        c = self.xq - self.xq_p
        lhs = np.eye(ng) - c[:, None] * response
        rhs = c * (base - response @ x[3])
        return np.linalg.solve(lhs, rhs)

    def _initial_state(self, pf: PowerFlowSolution) -> SimState:
        v = pf.v[self.gen_idx]
        s_gen = pf.p_gen + 1j * pf.q_gen
        current = np.conj(s_gen / v)
        delta = np.angle(v + 1j * self.xq * current)
        rot = np.exp(-1j * (delta - 0.5 * math.pi))
        i_dq = current * rot
        v_dq = v * rot
        i_d, i_q = i_dq.real, i_dq.imag
        ed_p = v_dq.real - self.xq_p * i_q
        eq_p = v_dq.imag + self.xd_p * i_d
        efd = eq_p + (self.xd - self.xd_p) * i_d
        x = np.vstack([delta, np.zeros_like(delta), eq_p, ed_p, efd])

        no_bess = np.zeros(len(self.bess_idx))
        x[3] = self._settle_ed(x, no_bess, pf.v)
        net = self._solve(x, self._m_base[False], no_bess, pf.v, 0.0)
        # refine the algebraic-consistent constants on the solved network
        x[4] = eq_p + (self.xd - self.xd_p) * net.i_d
        self.pm = net.p_e.copy()
        self.vref = net.v_t + x[4] / self.ka

        for k, gen in enumerate(self.case.generators):
            if not gen.efd_min <= x[4, k] <= gen.efd_max:
                raise InitializationError(
                    f"machine at bus {gen.bus}: initial field voltage {x[4, k]:.4f} pu "
                    f"outside [{gen.efd_min}, {gen.efd_max}]")
        residual = np.abs(self._derivatives(x, net))
        if residual.size and residual.max() > INIT_RESIDUAL_TOL:
            k = int(np.argmax(residual.max(axis=0)))
            raise InitializationError(
                f"machine at bus {self.case.generators[k].bus}: equilibrium residual "
                f"{residual[:, k].max():.3e} above {INIT_RESIDUAL_TOL:.0e}")
        self._freq = FrequencyEstimator(np.angle(net.v), self.config.freq_filter_tc, self.case.nominal_hz)
        logger.debug(f"Initialized {len(self.gen_idx)} machines and {len(self.bess_idx)} BESS units")
        return SimState(
            t=0.0,
            gen=GeneratorState.from_stacked(x),
            net=net,
            delta_f=np.zeros(self.n),
            bess=[bess_model.initial_state(self.spec) for _ in self.bess_buses],
        )

    def derivatives(self) -> np.ndarray:
        """Machine state derivatives at the current state (rows: delta, omega, E'q, E'd, Efd)."""
        return self._derivatives(self.state.gen.stacked(), self.state.net)

    # ---- time stepping ----
    def apply_event_state(self, contingency: Optional[Contingency]) -> None:
        """Re-solve the network at the current instant for the contingency's switching status."""
        st = self.state
        m = self._matrix(contingency, contingency is not None and contingency.active(st.t))
        p = np.array([u.p_es for u in st.bess])
        st.net = self._solve(st.gen.stacked(), m, p, st.net.v, st.t)

    def step(self, contingency: Optional[Contingency], dt: Optional[float] = None) -> SimState:
        dt = dt or self.config.dt
        st = self.state
        faulted = contingency is not None and contingency.active(st.t)
        m_interval = self._matrix(contingency, faulted)

        bess_next = [bess_model.step_unit(u, float(st.delta_f[i]), dt, self.spec)
                     for u, i in zip(st.bess, self.bess_idx)]
        p_next = np.array([u.p_es for u in bess_next])

        t1 = st.t + dt
        x0 = st.gen.stacked()
        f0 = self._derivatives(x0, st.net)
        x1 = self._limit(x0 + dt * f0)
        v_guess = st.net.v
        for _ in range(MAX_CORRECTOR_ITER):
            net_k = self._solve(x1, m_interval, p_next, v_guess, t1)
            x_next = self._limit(x0 + 0.5 * dt * (f0 + self._derivatives(x1, net_k)))
            change = float(np.max(np.abs(x_next - x1)))
            x1, v_guess = x_next, net_k.v
            if not change >= CORRECTOR_TOL:
                break
        else:
            logger.debug(f"corrector stopped at change {change:.3g} at t={t1:.4f}s")

        m_next = self._matrix(contingency, contingency is not None and contingency.active(t1))
        net1 = self._solve(x1, m_next, p_next, v_guess, t1)
        if not (np.all(np.isfinite(x1)) and np.all(np.isfinite(net1.v))):
            raise SimulationError(f"non-finite state at t={t1:.4f}s", t1)
        delta_f = self._freq.update(np.angle(net1.v), dt)
        self.state = SimState(t=t1, gen=GeneratorState.from_stacked(x1), net=net1,
                              delta_f=delta_f.copy(), bess=bess_next)
        return self.state

    def run(self, contingency: Optional[Contingency]) -> Trajectory:
        cfg = self.config
        n_steps = cfg.n_steps
        n_es = len(self.bess_buses)
        times = np.arange(n_steps + 1) * cfg.dt
        v_mag = np.empty((n_steps + 1, self.n))
        delta_f = np.empty((n_steps + 1, self.n))
        bess_p = np.empty((n_steps + 1, n_es))
        bess_soc = np.empty((n_steps + 1, n_es))

        if contingency is not None and contingency.fault_bus not in self.case.bus_index:
            raise ValueError(f"fault bus {contingency.fault_bus} is not in the case")
        if contingency is not None and contingency.active(self.state.t):
            self.apply_event_state(contingency)

        def record(k: int, st: SimState):
            v_mag[k] = np.abs(st.net.v)
            delta_f[k] = st.delta_f
            bess_p[k] = [u.p_es for u in st.bess]
            bess_soc[k] = [u.soc for u in st.bess]

        record(0, self.state)
        for k in range(1, n_steps + 1):
            self.state.t = times[k - 1]
            record(k, self.step(contingency, cfg.dt))
        return Trajectory(times=times, v_mag=v_mag, delta_f=delta_f, bess_p=bess_p,
                          bess_soc=bess_soc, bus_ids=self.case.bus_ids,
                          bess_buses=list(self.bess_buses), contingency=contingency)


# ------------------------ Module-level operations ------------------------
def initialize(case: NetworkCase, pf: PowerFlowSolution, placement=None,
               config: Optional[SimConfig] = None) -> Simulator:
    return Simulator(case, pf, placement, config)


def step(sim: Simulator, contingency: Optional[Contingency], dt: Optional[float] = None) -> SimState:
    return sim.step(contingency, dt)


def simulate(case: NetworkCase, placement, contingency: Optional[Contingency],
             config: Optional[SimConfig] = None,
             pf: Optional[PowerFlowSolution] = None) -> Trajectory:
    """Full trajectory over [0, t_end]; a pure function of its inputs."""
    if pf is None:
        pf = solve_power_flow(case)
    sim = Simulator(case, pf, placement, config)
    label = contingency.label if contingency is not None else "none"
    logger.debug(f"Simulating contingency {label} with BESS at {sim.bess_buses}")
    return sim.run(contingency)


def snapshot(traj: Trajectory, t: float) -> np.ndarray:
    """Bus voltage magnitudes at the sample nearest to t."""
    k = int(np.argmin(np.abs(traj.times - t)))
    return traj.v_mag[k].copy()


def trajectory_rows(traj: Trajectory) -> Tuple[List[str], List[List[float]]]:
    """Header and rows in the `t,v_<bus>...,f_<bus>...,p_bess_<bus>...,soc_<bus>...` layout."""
    header = (["t"] + [f"v_{b}" for b in traj.bus_ids] + [f"f_{b}" for b in traj.bus_ids]
              + [f"p_bess_{b}" for b in traj.bess_buses] + [f"soc_{b}" for b in traj.bess_buses])
    table = np.hstack([traj.times[:, None], traj.v_mag, traj.delta_f, traj.bess_p, traj.bess_soc])
    return header, table.tolist()
