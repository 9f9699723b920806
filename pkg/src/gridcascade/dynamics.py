"""Transient stability: classical machines with governor and exciter lags.

Each generator is the classical model: a source of fixed magnitude ``|E'|``
behind its transient reactance, with only the angle moving. The exciter runs
alongside and drives the field-current proxy ``i_fd = e_fd / e_fd0`` that the
field-overcurrent relay watches. Loads become constant admittances at t=0. Every RK4 stage re-solves the linear network
``(Y + Y_load + Y_gen) V = E / (j x'd)`` island by island.

Rotor equations (speed deviation ``domega`` in pu, angle in rad)::

    2H  d(domega)/dt = p_m - p_e - D domega
    d(delta)/dt      = omega_s domega
    T_gov dp_m/dt    = p_ref - domega / R - p_m          clamped to [0, p_max]
    T_ex  de_fd/dt   = K_a (V_ref - |V_t|) - e_fd        clamped to [0, ceiling * e_fd0]
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.sparse import csc_matrix, diags
from scipy.sparse.linalg import splu

from .acpf import PowerFlowSolution, build_ybus
from .netmodel import Network

V_COLLAPSE = 0.5  # island-mean |V| below this, with no fault applied, counts as a failed solve


@dataclass(frozen=True)
class FaultSpec:
    buses: frozenset[int]
    t_start: float
    duration: float | None = None  # None: until cleared by protection or explicitly

    def __post_init__(self):
        object.__setattr__(self, "buses", frozenset(self.buses))
        if self.t_start < 0:
            raise ValueError("fault start time must be nonnegative")


def apply_fault(net: Network, spec: FaultSpec) -> Network:
    _check_fault_buses(net, spec)
    return replace(net, faulted_buses=net.faulted_buses | spec.buses)


def clear_fault(net: Network, spec: FaultSpec) -> Network:
    _check_fault_buses(net, spec, need_in_service=False)
    return replace(net, faulted_buses=net.faulted_buses - spec.buses)


def _check_fault_buses(net, spec, need_in_service=True):
    for b in spec.buses:
        if b not in net.bus_position:
            raise KeyError(f"unknown bus {b}")
        if need_in_service and not net.bus(b).in_service:
            raise ValueError(f"bus {b} is not in service")


@dataclass(frozen=True)
class MachineState:
    """Snapshot of one generator."""

    gen_id: int
    delta: float
    domega: float
    e_int: float  # |E'|
    p_m: float
    e_fd: float
    i_fd: float
    p_e: float


@dataclass
class DynamicConstants:
    omega_s: float
    f0: float
    gen_ids: tuple[int, ...]
    H: np.ndarray
    D: np.ndarray
    xd: np.ndarray
    p_max: np.ndarray
    p_ref: np.ndarray
    v_ref: np.ndarray
    efd0: np.ndarray
    e_mag: np.ndarray  # |E'|, fixed at its pre-disturbance value
    has_gov: np.ndarray
    droop: np.ndarray
    t_gov: np.ndarray
    has_exc: np.ndarray
    k_a: np.ndarray
    t_ex: np.ndarray
    efd_max: np.ndarray
    load_ids: tuple[int, ...]
    y_load0: np.ndarray  # constant-impedance equivalent of each load, pu
    sheddable0: np.ndarray  # sheddable share of each load's original demand
    initial_generation: float


@dataclass
class SystemState:
    t: float
    v: np.ndarray  # complex bus voltages aligned with net.buses; 0 when out of service
    delta: np.ndarray  # aligned with net.generators
    domega: np.ndarray
    pm: np.ndarray
    efd: np.ndarray
    pe: np.ndarray
    load_scale: np.ndarray  # aligned with net.loads
    sheddable_left: np.ndarray  # fraction of original demand still sheddable
    ufls_fired: np.ndarray  # (n_loads, n_stages)
    island_frequency: dict[int, float]  # keyed by smallest bus id of the island
    island_failed: dict[int, bool]
    const: DynamicConstants = field(repr=False)
    _solver: object = field(default=None, repr=False, compare=False)

    @property
    def ifd(self) -> np.ndarray:
        """Field current proxy, per unit of the pre-disturbance field."""
        return self.efd / self.const.efd0

    def machine(self, net: Network, gen_id: int) -> MachineState:
        k = self.const.gen_ids.index(gen_id)
        return MachineState(gen_id=gen_id, delta=float(self.delta[k]),
                            domega=float(self.domega[k]), e_int=float(self.const.e_mag[k]),
                            p_m=float(self.pm[k]), e_fd=float(self.efd[k]),
                            i_fd=float(self.ifd[k]), p_e=float(self.pe[k]))

    def bus_voltage(self, net: Network, bus_id: int) -> complex:
        return complex(self.v[net.bus_position[bus_id]])

    def copy(self) -> "SystemState":
        return replace(self, v=self.v.copy(), delta=self.delta.copy(), domega=self.domega.copy(),
                       pm=self.pm.copy(), efd=self.efd.copy(), pe=self.pe.copy(),
                       load_scale=self.load_scale.copy(),
                       sheddable_left=self.sheddable_left.copy(),
                       ufls_fired=self.ufls_fired.copy(),
                       island_frequency=dict(self.island_frequency),
                       island_failed=dict(self.island_failed))


class NetworkSolver:
    """Factorized algebraic network for one topology / load level."""

    def __init__(self, net: Network, const: DynamicConstants, load_scale: np.ndarray):
        self.net = net
        self.load_scale = load_scale.copy()
        ybus = build_ybus(net)
        pos = {b: i for i, b in enumerate(ybus.bus_ids)}
        self.bus_rows = np.array([net.bus_position[b] for b in ybus.bus_ids], dtype=int)
        n = len(ybus.bus_ids)
        shunt = np.zeros(n, dtype=complex)
        load_pos = {lid: k for k, lid in enumerate(const.load_ids)}
        for ld in net.live_loads:
            k = load_pos[ld.id]
            shunt[pos[ld.bus]] += const.y_load0[k] * load_scale[k]
        gen_pos = {gid: k for k, gid in enumerate(const.gen_ids)}
        live = [(gen_pos[g.id], pos[g.bus]) for g in net.live_generators]
        self.live_gen = np.array([k for k, _ in live], dtype=int)
        self.live_gen_row = np.array([r for _, r in live], dtype=int)
        if live:
            np.add.at(shunt, self.live_gen_row, 1.0 / (1j * const.xd[self.live_gen]))
        Yaug = (ybus.Y + diags(shunt)).tocsc()
        self.n = n
        self.islands = []
        for isl in net.islands:
            rows = np.array(sorted(pos[b] for b in isl), dtype=int)
            sub = csc_matrix(Yaug[rows][:, rows])
            try:
                lu = splu(sub)
            except RuntimeError:
                lu = None
            self.islands.append((min(isl), rows, lu, bool(isl & net.faulted_buses)))

    def matches(self, net: Network, load_scale: np.ndarray) -> bool:
        return net is self.net and np.array_equal(load_scale, self.load_scale)

    def solve(self, e_int: np.ndarray, xd: np.ndarray):
        """Bus voltages (in-service order) and a per-island failure map."""
        inj = np.zeros(self.n, dtype=complex)
        if self.live_gen.size:
            np.add.at(inj, self.live_gen_row, e_int[self.live_gen] / (1j * xd[self.live_gen]))
        V = np.zeros(self.n, dtype=complex)
        failed = {}
        for key, rows, lu, faulted in self.islands:
            v = lu.solve(inj[rows]) if lu is not None else None
            if v is None or not np.all(np.isfinite(v)):
                # no algebraic solution: the island is treated as electrically dead
                V[rows] = 0.0
                failed[key] = True
                continue
            V[rows] = v
            failed[key] = not faulted and float(np.mean(np.abs(v))) < V_COLLAPSE
        return V, failed


def _solver_for(state: SystemState, net: Network) -> NetworkSolver:
    s = state._solver
    if isinstance(s, NetworkSolver) and s.matches(net, state.load_scale):
        return s
    s = NetworkSolver(net, state.const, state.load_scale)
    state._solver = s
    return s


def init_dynamics(net: Network, pf: PowerFlowSolution) -> SystemState:
    """Back-solve machine and control states so every derivative is zero at t=0."""
    if not pf.converged:
        raise ValueError("power flow did not converge; cannot initialise dynamics")
    pf_idx = {b: i for i, b in enumerate(pf.bus_ids)}
    Vpf = pf.V
    gens = net.generators
    ng = len(gens)
    omega_s = 2 * np.pi * net.frequency
    H = np.array([g.inertia_h for g in gens], dtype=float)
    D = np.array([g.damping_d for g in gens], dtype=float)
    xd = np.array([g.xd_prime for g in gens], dtype=float)
    p_max = np.array([g.p_max for g in gens], dtype=float)
    live = {g.id for g in net.live_generators}

    E = np.zeros(ng, dtype=complex)
    for k, g in enumerate(gens):
        if g.id not in live:
            continue
        p = pf.gen_p.get(g.id, 0.0)
        q = pf.gen_q.get(g.id, 0.0)
        if p > g.p_max + 1e-9:
            raise ValueError(f"generator {g.id} dispatched at {p:.6g} pu above p_max {g.p_max:.6g}")
        v = Vpf[pf_idx[g.bus]]
        i = np.conj(complex(p, q) / v)
        E[k] = v + 1j * g.xd_prime * i

    loads = net.loads
    y_load0 = np.zeros(len(loads), dtype=complex)
    for k, ld in enumerate(loads):
        if ld.in_service and ld.bus in pf_idx:
            vm = abs(Vpf[pf_idx[ld.bus]])
            y_load0[k] = complex(ld.p, -ld.q) / vm ** 2

    efd0 = np.abs(E)
    efd0_safe = np.where(efd0 > 0, efd0, 1.0)
    has_gov = np.array([g.governor is not None for g in gens], dtype=bool)
    has_exc = np.array([g.exciter is not None for g in gens], dtype=bool)
    droop = np.array([g.governor.droop if g.governor else np.inf for g in gens])
    t_gov = np.array([g.governor.t_gov if g.governor else np.inf for g in gens])
    k_a = np.array([g.exciter.k_a if g.exciter else 0.0 for g in gens])
    t_ex = np.array([g.exciter.t_ex if g.exciter else np.inf for g in gens])
    ceiling = np.array([g.exciter.ceiling if g.exciter else np.inf for g in gens])

    const = DynamicConstants(
        omega_s=omega_s, f0=net.frequency, gen_ids=tuple(g.id for g in gens), H=H, D=D,
        xd=xd, p_max=p_max, p_ref=np.zeros(ng), v_ref=np.zeros(ng), efd0=efd0_safe, e_mag=efd0.copy(),
        has_gov=has_gov, droop=droop, t_gov=t_gov, has_exc=has_exc, k_a=k_a, t_ex=t_ex,
        efd_max=ceiling * efd0_safe, load_ids=tuple(ld.id for ld in loads), y_load0=y_load0,
        sheddable0=np.array([ld.sheddable_fraction for ld in loads], dtype=float),
        initial_generation=0.0,
    )
    n_stages = len(net.ufls_stages)
    state = SystemState(
        t=0.0, v=np.zeros(len(net.buses), dtype=complex), delta=np.angle(E),
        domega=np.zeros(ng), pm=np.zeros(ng), efd=efd0.copy(), pe=np.zeros(ng),
        load_scale=np.ones(len(loads)), sheddable_left=const.sheddable0.copy(),
        ufls_fired=np.zeros((len(loads), n_stages), dtype=bool),
        island_frequency={}, island_failed={}, const=const,
    )
    _finish(state, net)
    # p_m and V_ref taken from the network solve so the t=0 point is an exact fixed point
    const.p_ref = state.pe.copy()
    state.pm = state.pe.copy()
    vt = _terminal_vm(state, net)
    with np.errstate(divide="ignore", invalid="ignore"):
        const.v_ref = np.where(has_exc, vt + efd0 / np.where(k_a > 0, k_a, 1.0), 0.0)
    const.initial_generation = float(state.pe[[k for k, g in enumerate(gens) if g.id in live]].sum())
    return state


def _terminal_vm(state: SystemState, net: Network) -> np.ndarray:
    rows = np.array([net.bus_position[g.bus] for g in net.generators], dtype=int)
    return np.abs(state.v[rows]) if rows.size else np.zeros(0)


def _electrical(state_vec, state: SystemState, net: Network, solver: NetworkSolver):
    delta, domega, pm, efd = state_vec
    c = state.const
    E = c.e_mag * np.exp(1j * delta)
    V, failed = solver.solve(E, c.xd)
    pe = np.zeros_like(pm)
    vt = np.zeros_like(pm)
    lg, lr = solver.live_gen, solver.live_gen_row
    if lg.size:
        vb = V[lr]
        ig = (E[lg] - vb) / (1j * c.xd[lg])
        pe[lg] = (E[lg] * np.conj(ig)).real
        vt[lg] = np.abs(vb)
    return V, failed, pe, vt


def _derivatives(x, state: SystemState, net: Network, solver: NetworkSolver):
    delta, domega, pm, efd = x
    c = state.const
    _, _, pe, vt = _electrical(x, state, net, solver)
    live = np.zeros(len(delta), dtype=bool)
    live[solver.live_gen] = True

    d_delta = c.omega_s * domega
    d_domega = (pm - pe - c.D * domega) / (2.0 * c.H)

    with np.errstate(divide="ignore", invalid="ignore"):
        d_pm = np.where(c.has_gov, (c.p_ref - domega / c.droop - pm) / c.t_gov, 0.0)
        d_efd = np.where(c.has_exc, (c.k_a * (c.v_ref - vt) - efd) / c.t_ex, 0.0)
    # non-windup limits
    d_pm = np.where((pm >= c.p_max) & (d_pm > 0) | (pm <= 0) & (d_pm < 0), 0.0, d_pm)
    d_efd = np.where((efd >= c.efd_max) & (d_efd > 0) | (efd <= 0) & (d_efd < 0), 0.0, d_efd)

    out = [d_delta, d_domega, d_pm, d_efd]
    return [np.where(live, d, 0.0) for d in out]


def derivatives(state: SystemState, net: Network) -> np.ndarray:
    """Stacked state derivatives at the current point (for equilibrium checks)."""
    solver = _solver_for(state, net)
    d = _derivatives((state.delta, state.domega, state.pm, state.efd), state, net, solver)
    return np.concatenate(d)


def step(state: SystemState, net: Network, dt: float) -> SystemState:
    """Advance one RK4 step; the network is re-solved at every stage."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    solver = _solver_for(state, net)
    x0 = (state.delta, state.domega, state.pm, state.efd)

    def add(x, k, h):
        return tuple(a + h * b for a, b in zip(x, k))

    k1 = _derivatives(x0, state, net, solver)
    k2 = _derivatives(add(x0, k1, dt / 2), state, net, solver)
    k3 = _derivatives(add(x0, k2, dt / 2), state, net, solver)
    k4 = _derivatives(add(x0, k3, dt), state, net, solver)
    x1 = tuple(a + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
               for a, b1, b2, b3, b4 in zip(x0, k1, k2, k3, k4))
    c = state.const
    delta, domega, pm, efd = x1
    pm = np.where(c.has_gov, np.clip(pm, 0.0, c.p_max), pm)
    efd = np.where(c.has_exc, np.clip(efd, 0.0, c.efd_max), efd)

    new = state.copy()
    new._solver = solver
    new.t = state.t + dt
    new.delta, new.domega, new.pm, new.efd = delta, domega, pm, efd
    _finish(new, net)
    return new


def _finish(state: SystemState, net: Network) -> None:
    """Solve the network at the state's current point and refresh derived fields."""
    solver = _solver_for(state, net)
    V, failed, pe, _ = _electrical((state.delta, state.domega, state.pm, state.efd),
                                   state, net, solver)
    v = np.zeros(len(net.buses), dtype=complex)
    v[solver.bus_rows] = V
    state.v = v
    state.pe = pe
    state.island_failed = failed
    state.island_frequency = island_frequencies(state, net)


def island_frequencies(state: SystemState, net: Network) -> dict[int, float]:
    """Centre-of-inertia frequency (Hz) of every island that has a live generator."""
    c = state.const
    gen_pos = {gid: k for k, gid in enumerate(c.gen_ids)}
    acc: dict[int, list[float]] = {}
    for g in net.live_generators:
        key = min(net.islands[net.island_of[g.bus]])
        k = gen_pos[g.id]
        a = acc.setdefault(key, [0.0, 0.0])
        a[0] += c.H[k] * state.domega[k]
        a[1] += c.H[k]
    return {key: c.f0 * (1.0 + hw / h) for key, (hw, h) in sorted(acc.items())}


def simulate(net: Network, state: SystemState, t_end: float, dt: float,
             faults: Iterable[FaultSpec] = ()) -> list[SystemState]:
    """Fixed-step run with scheduled faults; returns every state including the first.

    A fault is on for steps starting in ``[t_start, t_start + duration)``.
    """
    faults = list(faults)
    out = [state]
    n = int(round((t_end - state.t) / dt))
    faulted_nets: dict[frozenset[int], Network] = {}
    t0 = state.t
    for k in range(n):
        t = t0 + k * dt
        on = frozenset(b for f in faults for b in f.buses
                       if t >= f.t_start - 1e-12
                       and (f.duration is None or t < f.t_start + f.duration - 1e-12))
        cur = net
        if on:
            cur = faulted_nets.get(on)
            if cur is None:
                cur = faulted_nets[on] = apply_fault(net, FaultSpec(on, t))
        state = step(state, cur, dt)
        out.append(state)
    return out


def write_trajectory(states: list[SystemState], net: Network, path: str | Path) -> None:
    """CSV with t, per-generator angle (deg) and speed deviation, per-bus |V|."""
    gens = net.generators
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t"] + [f"delta_deg_g{g.id}" for g in gens]
                   + [f"domega_g{g.id}" for g in gens]
                   + [f"vm_b{b.id}" for b in net.buses])
        for s in states:
            w.writerow([f"{s.t:.6f}"] + [f"{x:.9g}" for x in np.degrees(s.delta)]
                       + [f"{x:.9g}" for x in s.domega]
                       + [f"{x:.9g}" for x in np.abs(s.v)])
