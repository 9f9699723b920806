"""Time-domain cascade driver.

One run walks the fixed-step loop: transient step, relay-tripped edges,
relay-tripped nodes, isolated nodes, then the collapse test. The attack at
``t_f`` is a three-phase fault on the target buses for that step; the targets
and every edge touching them are removed in the same iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .acpf import solve_ac
from .dynamics import FaultSpec, SystemState, apply_fault, init_dynamics, step
from .netmodel import BusStatus, Network, isolated_nodes, remove_elements
from .protection import Relay, apply_ufls, arm_relays, evaluate, measure, ufls

if TYPE_CHECKING:
    from .scenario import Scenario

CAPACITY_FRACTION = 0.4
FREQ_BAND = (55.0, 65.0)
FREQ_HOLD = 1.0  # s


class Cause(str, Enum):
    ATTACK = "attack"
    RELAY = "relay"
    ISOLATION = "isolation"
    UFLS = "ufls"
    COLLAPSE = "collapse"


@dataclass(frozen=True)
class TripEvent:
    t: float
    element: str  # "bus", "branch", "island" (UFLS) or "system" (collapse)
    element_id: int | None
    cause: Cause
    relay_id: int | None = None
    relay_kind: str | None = None
    zone: str | None = None
    hidden: bool | None = None
    detail: str | None = None

    def to_record(self) -> dict:
        rec = {"t": round(self.t, 9), "element": self.element, "id": self.element_id,
               "cause": self.cause.value}
        if self.relay_id is not None:
            rec.update(relay=self.relay_id, kind=self.relay_kind, zone=self.zone,
                       hidden=self.hidden)
        if self.detail is not None:
            rec["detail"] = self.detail
        return rec

    def key(self) -> tuple:
        """Comparable summary used by hand-traced tests."""
        return (round(self.t, 9), self.element, self.element_id, self.cause.value)


@dataclass(frozen=True)
class RelayOperation:
    t: float
    relay_id: int
    kind: str
    element: int
    zone: str | None
    hidden: bool


@dataclass
class TimeSeries:
    t: list[float] = field(default_factory=list)
    load_mw: list[float] = field(default_factory=list)
    gen_mw: list[float] = field(default_factory=list)
    delta_deg: list[np.ndarray] = field(default_factory=list)
    vm: list[np.ndarray] = field(default_factory=list)
    gen_ids: tuple[int, ...] = ()
    bus_ids: tuple[int, ...] = ()

    def record(self, state: SystemState, net: Network) -> None:
        c = state.const
        base = net.base_mva
        live_loads = {ld.id for ld in net.live_loads}
        vm_all = np.abs(state.v)
        load = 0.0
        for k, ld in enumerate(net.loads):
            if ld.id in live_loads:
                v = vm_all[net.bus_position[ld.bus]]
                load += v * v * (c.y_load0[k] * state.load_scale[k]).real
        live_gens = {g.id for g in net.live_generators}
        mask = np.array([g.id in live_gens for g in net.generators], dtype=bool)
        self.t.append(state.t)
        self.load_mw.append(load * base)
        self.gen_mw.append(float(state.pe[mask].sum()) * base if mask.any() else 0.0)
        self.delta_deg.append(np.where(mask, np.degrees(state.delta), np.nan))
        alive = np.array([b.in_service for b in net.buses], dtype=bool)
        self.vm.append(np.where(alive, vm_all, 0.0))


@dataclass
class CascadeResult:
    delta_n: int
    c: int
    events: list[TripEvent]
    series: TimeSeries
    n0: int
    t_stop: float
    relay_log: list[RelayOperation] = field(default_factory=list)
    final_net: Network | None = field(default=None, repr=False)
    model: str = "ac"

    def event_keys(self) -> list[tuple]:
        return [e.key() for e in self.events]


def account_outages(net: Network, n0: int) -> int:
    return n0 - net.n_in_service


def ufls_exhausted(state: SystemState, net: Network, island: Iterable[int]) -> bool:
    """True when every live load in the island has gone through every stage."""
    island = set(island)
    load_pos = {lid: k for k, lid in enumerate(state.const.load_ids)}
    rows = [load_pos[ld.id] for ld in net.live_loads if ld.bus in island]
    return bool(np.all(state.ufls_fired[rows])) if rows else True


def detect_collapse(state: SystemState, net: Network, out_of_band_time: float = 0.0) -> str | None:
    """Name of the collapse condition that holds, or None.

    capacity: live generation capacity below 40 % of the initial generation;
    voltage: an island's network solve failed after all UFLS stages fired;
    frequency: every island out of [55, 65] Hz for ``out_of_band_time`` >= 1 s
    (the caller keeps that clock).

    Island failures refer to the topology the state was solved on, which can
    be one removal step behind ``net``; islands removed since then are ignored.
    """
    capacity = sum(g.p_max for g in net.live_generators)
    if capacity < CAPACITY_FRACTION * state.const.initial_generation:
        return "capacity"
    solved = _solved_net(state, net)
    alive = set(net.in_service_bus_ids)
    for isl in solved.islands:
        if (state.island_failed.get(min(isl)) and isl & alive
                and ufls_exhausted(state, solved, isl)):
            return "voltage"
    if out_of_band_time >= FREQ_HOLD - 1e-9:
        return "frequency"
    return None


def _solved_net(state: SystemState, net: Network) -> Network:
    solver = state._solver
    return solver.net if solver is not None else net


def all_islands_out_of_band(state: SystemState) -> bool:
    f = state.island_frequency
    return bool(f) and all(not (FREQ_BAND[0] <= x <= FREQ_BAND[1]) for x in f.values())


def run_cascade(net: Network, scenario: "Scenario", hidden: Iterable[int] = (),
                record: bool = True) -> CascadeResult:
    dt = scenario.dt
    n_end = int(round(scenario.t_end / dt))
    k_f = int(round(scenario.t_f / dt))
    targets = frozenset(scenario.target_set)
    for b in targets:
        if b not in net.bus_position:
            raise KeyError(f"target bus {b} not in network")

    pf = solve_ac(net)
    if not pf.converged:
        raise ValueError("base case power flow did not converge")
    state = init_dynamics(net, pf)
    relays = arm_relays(net, hidden)
    n0 = net.n_in_service
    events: list[TripEvent] = []
    relay_log: list[RelayOperation] = []
    series = TimeSeries(gen_ids=tuple(g.id for g in net.generators),
                        bus_ids=tuple(b.id for b in net.buses))
    if record:
        series.record(state, net)

    c = 0
    clock = 0.0
    t = 0.0
    for k in range(n_end + 1):
        t = k * dt
        attack = k == k_f and bool(targets)
        live_targets = frozenset(b for b in targets if net.bus(b).in_service) if attack else ()
        step_net = apply_fault(net, FaultSpec(live_targets, t)) if live_targets else net
        state = step(state, step_net, dt)

        fired = _evaluate_relays(relays, state, step_net, dt)
        for r in fired:
            relay_log.append(RelayOperation(t, r.id, r.kind.value, r.element, r.trip_zone,
                                            r.has_hidden_failure))

        # tripped edges
        removed_branches: dict[int, TripEvent] = {}
        if live_targets:
            for br in net.live_branches:
                if br.from_bus in live_targets or br.to_bus in live_targets:
                    removed_branches[br.id] = TripEvent(t, "branch", br.id, Cause.ATTACK)
        live_ids = {br.id for br in net.live_branches}
        for r in fired:
            if r.protects_branch and r.element in live_ids and r.element not in removed_branches:
                removed_branches[r.element] = _relay_event(t, "branch", r.element, r)
        for bid in sorted(removed_branches):
            events.append(removed_branches[bid])
        net = remove_elements(net, branches=removed_branches)

        # tripped nodes
        removed_nodes: dict[int, TripEvent] = {}
        for b in sorted(live_targets):
            removed_nodes[b] = TripEvent(t, "bus", b, Cause.ATTACK)
        alive = set(net.in_service_bus_ids)
        for r in fired:
            if not r.protects_branch and r.element in alive and r.element not in removed_nodes:
                removed_nodes[r.element] = _relay_event(t, "bus", r.element, r)
        if removed_nodes:
            net = _remove_nodes(net, removed_nodes, events, BusStatus.TRIPPED)

        # isolated nodes, then sourceless islands
        iso = isolated_nodes(net)
        if iso:
            net = _remove_nodes(net, {b: TripEvent(t, "bus", b, Cause.ISOLATION) for b in iso},
                                events, BusStatus.ISOLATED)
        dead = _sourceless_buses(net)
        if dead:
            net = _remove_nodes(net, {b: TripEvent(t, "bus", b, Cause.ISOLATION) for b in dead},
                                events, BusStatus.ISOLATED)

        # stage decisions use the islands the frequencies were computed on
        live_loads = {ld.id for ld in net.live_loads}
        actions = [replace(a, load_ids=ids) for a in ufls(state, step_net)
                   if (ids := tuple(i for i in a.load_ids if i in live_loads))]
        for a in actions:
            events.append(TripEvent(t, "island", a.island, Cause.UFLS,
                                    detail=f"stage {a.stage + 1} at {a.frequency:.4f} Hz, "
                                           f"{a.shed_pu * net.base_mva:.6g} MW"))
        state = apply_ufls(state, net, actions)

        clock = clock + dt if all_islands_out_of_band(state) else 0.0
        if record:
            series.record(state, net)
        reason = detect_collapse(state, net, clock)
        if reason is not None:
            c = 1
            events.append(TripEvent(t, "system", None, Cause.COLLAPSE, detail=reason))
            break

    return CascadeResult(delta_n=account_outages(net, n0), c=c, events=events, series=series,
                         n0=n0, t_stop=t, relay_log=relay_log, final_net=net)


def _evaluate_relays(relays: list[Relay], state: SystemState, net: Network, dt: float):
    fired = []
    for r in relays:
        if r.u:
            continue
        if evaluate(r, measure(r, state, net), dt):
            fired.append(r)
    return fired


def _relay_event(t, element, element_id, r: Relay) -> TripEvent:
    return TripEvent(t, element, element_id, Cause.RELAY, relay_id=r.id,
                     relay_kind=r.kind.value, zone=r.trip_zone, hidden=r.has_hidden_failure)


def _remove_nodes(net: Network, nodes: dict[int, TripEvent], events: list[TripEvent],
                  status: BusStatus) -> Network:
    """Remove buses; their remaining live branches go out with the same cause."""
    incident = {}
    for br in net.live_branches:
        for end in (br.from_bus, br.to_bus):
            if end in nodes and br.id not in incident:
                e = nodes[end]
                incident[br.id] = TripEvent(e.t, "branch", br.id, e.cause, e.relay_id,
                                            e.relay_kind, e.zone, e.hidden,
                                            detail=f"incident to bus {end}")
    for b in sorted(nodes):
        events.append(nodes[b])
    for bid in sorted(incident):
        events.append(incident[bid])
    return remove_elements(net, branches=incident, buses=nodes, bus_status=status)


def _sourceless_buses(net: Network) -> set[int]:
    gen_buses = {g.bus for g in net.live_generators}
    out = set()
    for isl in net.islands:
        if not isl & gen_buses:
            out |= isl
    return out


def outage_summary(result: CascadeResult) -> dict:
    return {"delta_n": result.delta_n, "c": result.c, "n0": result.n0,
            "t_stop": round(result.t_stop, 9), "events": len(result.events),
            "model": result.model}
