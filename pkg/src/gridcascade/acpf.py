"""Steady-state solvers: admittance matrix, Newton-Raphson AC power flow, DC power flow."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix, csc_matrix, hstack, vstack, diags
from scipy.sparse.linalg import spsolve

from .netmodel import BusType, Network

FAULT_CONDUCTANCE = 1e5  # pu, bolted three-phase fault shunt
PF_TOLERANCE = 1e-8
PF_MAX_ITER = 20
QLIM_CHECK_BELOW = 1e-3  # start PV->PQ checks once the mismatch is this small


class SingularNetworkError(RuntimeError):
    pass


@dataclass
class AdmittanceMatrix:
    Y: csr_matrix
    bus_ids: tuple[int, ...]

    @property
    def index(self) -> dict[int, int]:
        return {b: i for i, b in enumerate(self.bus_ids)}

    def entry(self, i_bus: int, j_bus: int) -> complex:
        idx = self.index
        return complex(self.Y[idx[i_bus], idx[j_bus]])


@dataclass
class PowerFlowSolution:
    bus_ids: tuple[int, ...]
    vm: np.ndarray
    va: np.ndarray  # rad
    converged: bool
    iterations: int
    max_mismatch: float
    gen_p: dict[int, float] = field(default_factory=dict)
    gen_q: dict[int, float] = field(default_factory=dict)
    pq_switched: tuple[int, ...] = ()  # PV buses converted to PQ by q-limits

    @property
    def V(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)

    def voltage(self, bus_id: int) -> complex:
        k = self.bus_ids.index(bus_id)
        return complex(self.V[k])


def branch_admittances(br) -> tuple[complex, complex, complex, complex]:
    """(Yff, Yft, Ytf, Ytt) of the pi model; off-nominal tap sits on the from side."""
    if br.r == 0 and br.x == 0:
        raise ValueError(f"branch {br.id} has zero impedance")
    ys = 1.0 / complex(br.r, br.x)
    bc = 1j * br.b_shunt / 2.0
    t = br.tap
    return (ys + bc) / (t * t), -ys / t, -ys / t, ys + bc


def build_ybus(net: Network) -> AdmittanceMatrix:
    ids = net.in_service_bus_ids
    if not ids:
        raise ValueError("network has no in-service bus")
    idx = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    rows, cols, vals = [], [], []
    for br in net.live_branches:
        yff, yft, ytf, ytt = branch_admittances(br)
        f, t = idx[br.from_bus], idx[br.to_bus]
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [yff, yft, ytf, ytt]
    for b in ids:
        bus = net.bus(b)
        ysh = complex(bus.gs, bus.bs)
        if b in net.faulted_buses:
            ysh += FAULT_CONDUCTANCE
        if ysh != 0:
            rows.append(idx[b])
            cols.append(idx[b])
            vals.append(ysh)
    Y = csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n, n))
    Y.sum_duplicates()
    return AdmittanceMatrix(Y=Y, bus_ids=ids)


# -- Newton-Raphson ---------------------------------------------------------


def power_mismatch(Y, V, Sbus):
    """Complex injection mismatch S_calc - S_spec."""
    return V * np.conj(Y @ V) - Sbus


def dS_dV(Y, V):
    """Partial derivatives of bus injections w.r.t. voltage angle and magnitude."""
    Ibus = Y @ V
    dV = diags(V)
    dI = diags(Ibus)
    dVn = diags(V / np.abs(V))
    dS_dVm = dV @ np.conj(Y @ dVn) + np.conj(dI) @ dVn
    dS_dVa = 1j * dV @ np.conj(dI - Y @ dV)
    return csr_matrix(dS_dVa), csr_matrix(dS_dVm)


def jacobian(Y, V, pvpq, pq):
    """Power-flow Jacobian for unknowns [Va(pv+pq), Vm(pq)], equations [P(pv+pq), Q(pq)]."""
    dVa, dVm = dS_dV(Y, V)
    J11 = dVa[pvpq][:, pvpq].real
    J12 = dVm[pvpq][:, pq].real
    J21 = dVa[pq][:, pvpq].imag
    J22 = dVm[pq][:, pq].imag
    return csc_matrix(vstack([hstack([J11, J12]), hstack([J21, J22])]))


def mismatch_vector(Y, V, Sbus, pvpq, pq):
    mis = power_mismatch(Y, V, Sbus)
    return np.concatenate([mis[pvpq].real, mis[pq].imag])


def _bus_types(net: Network, idx):
    """Per-bus types with exactly one reference per island.

    Islands without a designated slack get the bus of their largest-inertia
    generator as reference. PV buses without a live generator become PQ.
    """
    gen_buses = {}
    for g in net.live_generators:
        gen_buses.setdefault(g.bus, []).append(g)
    types = {}
    for b in net.in_service_bus_ids:
        t = net.bus(b).type
        if b not in gen_buses:
            t = BusType.PQ
        elif t is BusType.SLACK:
            t = BusType.SLACK
        else:
            t = BusType.PV
        types[b] = t
    for isl in net.islands:
        slacks = sorted(b for b in isl if types[b] is BusType.SLACK)
        if not slacks:
            gens = [g for b in isl for g in gen_buses.get(b, ())]
            if not gens:
                raise ValueError(f"island containing bus {min(isl)} has no generator")
            ref = reference_generator(gens).bus
            types[ref] = BusType.SLACK
        else:
            for b in slacks[1:]:
                types[b] = BusType.PV
    return types, gen_buses


def reference_generator(gens):
    """Largest inertia wins; ties go to the lowest generator id."""
    return min(gens, key=lambda g: (-g.inertia_h, g.id))


def solve_ac(net: Network, init: PowerFlowSolution | None = None, *,
             tol: float = PF_TOLERANCE, max_iter: int = PF_MAX_ITER,
             enforce_q_limits: bool = True) -> PowerFlowSolution:
    ybus = build_ybus(net)
    Y = ybus.Y
    ids = ybus.bus_ids
    idx = ybus.index
    n = len(ids)
    types, gen_buses = _bus_types(net, idx)

    Sbus = np.zeros(n, dtype=complex)
    for g in net.live_generators:
        Sbus[idx[g.bus]] += g.p_set
    for ld in net.live_loads:
        Sbus[idx[ld.bus]] -= complex(ld.p, ld.q)
    qd = np.zeros(n)
    for ld in net.live_loads:
        qd[idx[ld.bus]] += ld.q

    if init is not None:
        V = init.V.copy()
        if tuple(init.bus_ids) != tuple(ids):
            raise ValueError("initial solution does not match the network's buses")
    else:
        V = np.ones(n, dtype=complex)
    for b, gens in gen_buses.items():
        if types[b] is not BusType.PQ:
            k = idx[b]
            V[k] = gens[0].v_set * V[k] / abs(V[k])

    pv = [idx[b] for b in ids if types[b] is BusType.PV]
    pq = [idx[b] for b in ids if types[b] is BusType.PQ]
    qmin = {idx[b]: sum(g.q_min for g in gs) for b, gs in gen_buses.items()}
    qmax = {idx[b]: sum(g.q_max for g in gs) for b, gs in gen_buses.items()}
    switched = []

    it = 0
    converged = False
    while True:
        pvpq = pv + pq
        F = mismatch_vector(Y, V, Sbus, pvpq, pq)
        normF = float(np.max(np.abs(F))) if F.size else 0.0

        if enforce_q_limits and pv and normF <= QLIM_CHECK_BELOW:
            Qg = (V * np.conj(Y @ V)).imag + qd
            viol = [k for k in pv if Qg[k] > qmax[k] or Qg[k] < qmin[k]]
            if viol:
                for k in viol:
                    lim = qmax[k] if Qg[k] > qmax[k] else qmin[k]
                    Sbus[k] = complex(Sbus[k].real, lim - qd[k])
                    switched.append(ids[k])
                pv = [k for k in pv if k not in viol]
                pq = sorted(pq + viol)
                continue

        if normF <= tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        J = jacobian(Y, V, pvpq, pq)
        try:
            dx = spsolve(J, F)
        except RuntimeError:
            break
        if not np.all(np.isfinite(dx)):
            break
        npv = len(pvpq)
        Va = np.angle(V)
        Vm = np.abs(V)
        Va[pvpq] -= dx[:npv]
        Vm[pq] -= dx[npv:]
        V = Vm * np.exp(1j * Va)

    Scalc = V * np.conj(Y @ V)
    gen_p, gen_q = {}, {}
    for b, gs in gen_buses.items():
        k = idx[b]
        p_inj = Scalc[k].real + sum(ld.p for ld in net.live_loads if ld.bus == b)
        q_inj = Scalc[k].imag + qd[k]
        if types[b] is not BusType.SLACK:
            p_inj = sum(g.p_set for g in gs)
        _split(gs, p_inj, q_inj, gen_p, gen_q)
    return PowerFlowSolution(bus_ids=ids, vm=np.abs(V), va=np.angle(V), converged=converged,
                             iterations=it, max_mismatch=normF, gen_p=gen_p, gen_q=gen_q,
                             pq_switched=tuple(switched))


def _split(gens, p, q, gen_p, gen_q):
    if len(gens) == 1:
        gen_p[gens[0].id] = p
        gen_q[gens[0].id] = q
        return
    pcap = sum(g.p_max for g in gens) or len(gens)
    qspan = sum(g.q_max - g.q_min for g in gens)
    for g in gens:
        share = (g.p_max / pcap) if pcap else 1 / len(gens)
        if all(gg.p_set == 0 for gg in gens):
            gen_p[g.id] = p * share
        else:
            gen_p[g.id] = g.p_set + (p - sum(gg.p_set for gg in gens)) * share
        gen_q[g.id] = q * ((g.q_max - g.q_min) / qspan if qspan else 1 / len(gens))


# -- flows ----------------------------------------------------------------


def branch_flows(net: Network, sol: PowerFlowSolution, V: np.ndarray | None = None):
    """Complex power (pu) entering each branch at its from and to ends.

    Returns ``(s_from, s_to)`` arrays aligned with ``net.branches``; open
    branches carry zero. Multiply ``abs()`` by ``net.base_mva`` for MVA.
    """
    if V is None:
        V = sol.V
    idx = {b: i for i, b in enumerate(sol.bus_ids)}
    live = {br.id for br in net.live_branches}
    s_from = np.zeros(len(net.branches), dtype=complex)
    s_to = np.zeros(len(net.branches), dtype=complex)
    for k, br in enumerate(net.branches):
        if br.id not in live:
            continue
        yff, yft, ytf, ytt = branch_admittances(br)
        vf, vt = V[idx[br.from_bus]], V[idx[br.to_bus]]
        s_from[k] = vf * np.conj(yff * vf + yft * vt)
        s_to[k] = vt * np.conj(ytf * vf + ytt * vt)
    return s_from, s_to


# -- DC power flow ------------------------------------------------------------


def dc_bmatrix(net: Network, ids) -> csr_matrix:
    idx = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    rows, cols, vals = [], [], []
    for br in net.live_branches:
        if br.from_bus not in idx or br.to_bus not in idx:
            continue
        b = 1.0 / (br.x * br.tap)
        f, t = idx[br.from_bus], idx[br.to_bus]
        rows += [f, f, t, t]
        cols += [f, t, f, t]
        vals += [b, -b, -b, b]
    B = csr_matrix((np.array(vals, dtype=float), (rows, cols)), shape=(n, n))
    B.sum_duplicates()
    return B


def dc_injections(net: Network, gen_dispatch: dict[int, float] | None = None) -> dict[int, float]:
    p = {b: 0.0 for b in net.in_service_bus_ids}
    for g in net.live_generators:
        p[g.bus] += g.p_set if gen_dispatch is None else gen_dispatch.get(g.id, 0.0)
    for ld in net.live_loads:
        p[ld.bus] -= ld.p
    return p


def solve_dc(net: Network, injections: dict[int, float] | None = None,
             references: dict[int, int] | None = None) -> dict[int, float]:
    """Bus angles (rad) from B theta = P, one reference bus per island.

    Flat voltage and lossless branches; susceptance 1/(x*tap). The reference
    of an island absorbs its mismatch. ``references`` maps island index to
    reference bus; by default the island's slack bus, else the bus of its
    largest-inertia generator, else its lowest bus id.
    """
    if injections is None:
        injections = dc_injections(net)
    theta = {}
    gens_by_bus = {}
    for g in net.live_generators:
        gens_by_bus.setdefault(g.bus, []).append(g)
    for k, isl in enumerate(net.islands):
        ids = sorted(isl)
        if references and k in references:
            ref = references[k]
        else:
            slacks = [b for b in ids if net.bus(b).type is BusType.SLACK and b in gens_by_bus]
            gens = [g for b in ids for g in gens_by_bus.get(b, ())]
            ref = slacks[0] if slacks else (reference_generator(gens).bus if gens else ids[0])
        if len(ids) == 1:
            theta[ids[0]] = 0.0
            continue
        B = dc_bmatrix(net, ids)
        keep = [i for i, b in enumerate(ids) if b != ref]
        P = np.array([injections[ids[i]] for i in keep])
        Bred = csc_matrix(B[keep][:, keep])
        x = spsolve(Bred, P)
        x = np.atleast_1d(x)
        if not np.all(np.isfinite(x)):
            raise SingularNetworkError(f"singular B matrix in island of bus {ids[0]}")
        theta[ref] = 0.0
        for i, v in zip(keep, x):
            theta[ids[i]] = float(v)
    return theta
