"""Steady-state DC cascade baseline.

Each round balances every island, solves DC power flow, trips every branch
whose end-to-end angle exceeds 70 degrees, and removes buses left without
branches. The loop stops at the first round with no removals.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .acpf import solve_dc
from .cascade import Cause, TripEvent
from .netmodel import BusStatus, Network, isolated_nodes, remove_elements

ANGLE_LIMIT_DEG = 70.0
BALANCE_TOL = 1e-9


@dataclass(frozen=True)
class DcRound:
    branches: frozenset[int]
    buses: frozenset[int]

    @property
    def empty(self) -> bool:
        return not self.branches and not self.buses


@dataclass
class DcCascadeResult:
    delta_n: int
    rounds: list[DcRound]
    events: list[TripEvent]
    n0: int
    final_net: Network | None = field(default=None, repr=False)
    c: int = 0  # a static model has no notion of dynamic collapse
    model: str = "dc"


def rebalance(net: Network) -> tuple[dict[int, float], set[int]]:
    """Scale generation in each island to its load.

    Dispatch is proportional to the set points, capped at p_max with the
    remainder spread over the uncapped units. Returns the dispatch and the
    buses of islands that cannot be balanced (no generation, or load above
    capacity).
    """
    dispatch: dict[int, float] = {}
    dead: set[int] = set()
    gens_by_bus: dict[int, list] = {}
    for g in net.live_generators:
        gens_by_bus.setdefault(g.bus, []).append(g)
    load_by_bus: dict[int, float] = {}
    for ld in net.live_loads:
        load_by_bus[ld.bus] = load_by_bus.get(ld.bus, 0.0) + ld.p
    for isl in net.islands:
        gens = [g for b in sorted(isl) for g in gens_by_bus.get(b, ())]
        demand = sum(load_by_bus.get(b, 0.0) for b in isl)
        cap = sum(g.p_max for g in gens)
        if not gens or demand > cap + BALANCE_TOL:
            dead |= isl
            continue
        dispatch.update(_proportional(gens, demand))
    return dispatch, dead


def _proportional(gens, demand: float) -> dict[int, float]:
    out = {g.id: 0.0 for g in gens}
    free = list(gens)
    left = demand
    while free and left > BALANCE_TOL:
        w = {g.id: max(g.p_set, 0.0) for g in free}
        total = sum(w.values())
        if total <= 0:
            w = {g.id: g.p_max for g in free}
            total = sum(w.values())
        capped = [g for g in free if out[g.id] + left * w[g.id] / total > g.p_max]
        if not capped:
            for g in free:
                out[g.id] += left * w[g.id] / total
            left = 0.0
            break
        for g in capped:
            left -= g.p_max - out[g.id]
            out[g.id] = g.p_max
        free = [g for g in free if g not in capped]
    return out


def angle_violations(net: Network, theta: dict[int, float],
                     limit_deg: float = ANGLE_LIMIT_DEG) -> list[int]:
    """Branches whose angle difference is strictly above the limit."""
    return [br.id for br in net.live_branches
            if abs(math.degrees(theta[br.from_bus] - theta[br.to_bus])) > limit_deg]


def _injections(net: Network, dispatch: dict[int, float]) -> dict[int, float]:
    p = {b: 0.0 for b in net.in_service_bus_ids}
    for g in net.live_generators:
        p[g.bus] += dispatch.get(g.id, 0.0)
    for ld in net.live_loads:
        p[ld.bus] -= ld.p
    return p


def run_dc_cascade(net: Network, target_set=(), limit_deg: float = ANGLE_LIMIT_DEG) -> DcCascadeResult:
    targets = frozenset(target_set)
    for b in targets:
        if b not in net.bus_position:
            raise KeyError(f"target bus {b} not in network")
    n0 = net.n_in_service
    events: list[TripEvent] = []
    rounds: list[DcRound] = []

    if targets:
        edges = sorted(br.id for br in net.live_branches
                       if br.from_bus in targets or br.to_bus in targets)
        events += [TripEvent(0.0, "branch", b, Cause.ATTACK) for b in edges]
        events += [TripEvent(0.0, "bus", b, Cause.ATTACK) for b in sorted(targets)]
        net = remove_elements(net, branches=edges, buses=targets)

    limit = len(net.live_branches) + net.n_in_service + 1
    for k in range(1, limit + 1):
        t = float(k)  # round index stands in for time
        dispatch, dead = rebalance(net)
        removed_br: set[int] = set()
        removed_bus: set[int] = set()
        if dead:
            dead_br = sorted(br.id for br in net.live_branches if br.from_bus in dead)
            events += [TripEvent(t, "branch", b, Cause.ISOLATION, detail="unbalanced island")
                       for b in dead_br]
            events += [TripEvent(t, "bus", b, Cause.ISOLATION, detail="unbalanced island")
                       for b in sorted(dead)]
            net = remove_elements(net, branches=dead_br, buses=dead, bus_status=BusStatus.ISOLATED)
            removed_br |= set(dead_br)
            removed_bus |= dead
        if net.n_in_service:
            theta = solve_dc(net, _injections(net, dispatch))
            trips = angle_violations(net, theta, limit_deg)
            events += [TripEvent(t, "branch", b, Cause.RELAY, relay_kind="angle",
                                 detail=f"angle above {limit_deg:g} deg") for b in trips]
            net = remove_elements(net, branches=trips)
            removed_br |= set(trips)
            iso = isolated_nodes(net)
            events += [TripEvent(t, "bus", b, Cause.ISOLATION) for b in sorted(iso)]
            net = remove_elements(net, buses=iso, bus_status=BusStatus.ISOLATED)
            removed_bus |= set(iso)
        rounds.append(DcRound(frozenset(removed_br), frozenset(removed_bus)))
        if not removed_br and not removed_bus:
            break
    return DcCascadeResult(delta_n=n0 - net.n_in_service, rounds=rounds, events=events, n0=n0,
                           final_net=net)
