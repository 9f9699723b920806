"""Protection relays, hidden failures and under-frequency load shedding.

Every relay watches one measured quantity ``W`` and trips (``u = 1``) when
``W`` stays inside one of its zones for that zone's delay. A relay with a
hidden failure swaps its nominal zones ``R`` for a wider set ``H``; anything
that trips the nominal relay also trips the defective one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .acpf import branch_admittances
from .dynamics import SystemState
from .netmodel import Network

TIMER_EPS = 1e-9
MIN_CURRENT = 1e-6


class RelayKind(str, Enum):
    MHO = "mho_distance"
    OVERCURRENT = "directional_overcurrent"
    OUT_OF_STEP = "out_of_step"
    FREQUENCY = "under_over_frequency"
    UNDER_VOLTAGE = "under_voltage"
    FIELD = "field_overcurrent"


BRANCH_KINDS = (RelayKind.MHO, RelayKind.OVERCURRENT)
MACHINE_KINDS = (RelayKind.OUT_OF_STEP, RelayKind.FREQUENCY, RelayKind.UNDER_VOLTAGE,
                 RelayKind.FIELD)

DEFAULT_SETTINGS: dict[RelayKind, dict[str, float]] = {
    RelayKind.MHO: {"zone1_reach": 0.8, "zone1_delay": 0.0, "zone2_reach": 1.2,
                    "zone2_delay": 0.3, "zone3_reach": 2.2, "zone3_delay": 1.0},
    RelayKind.OVERCURRENT: {"pickup": 1.5, "delay": 0.5},
    RelayKind.OUT_OF_STEP: {"angle": 180.0, "delay": 0.0},
    RelayKind.FREQUENCY: {"low": 57.0, "high": 61.8, "delay": 0.1},
    RelayKind.UNDER_VOLTAGE: {"pickup": 0.7, "delay": 1.0},
    RelayKind.FIELD: {"pickup": 1.6, "delay": 2.0},
}


@dataclass(frozen=True)
class Zone:
    """One operating region.

    Mho zones are circles through the origin with diameter ``reach``. Scalar
    zones are the set ``W < lo or W > hi``; a directional zone also needs
    forward current.
    """

    name: str
    delay: float
    reach: complex | None = None
    lo: float = -math.inf
    hi: float = math.inf
    directional: bool = False

    def contains(self, m: "Measurement") -> bool:
        if self.reach is not None:
            c = self.reach / 2
            return abs(m.value - c) <= abs(self.reach) / 2
        w = m.value
        inside = w < self.lo or w > self.hi
        if inside and self.directional:
            return bool(m.forward)
        return inside


@dataclass(frozen=True)
class Measurement:
    kind: RelayKind
    value: complex | float
    forward: bool | None = None  # overcurrent only: power flows from the relay bus into the line


@dataclass
class Relay:
    id: int
    kind: RelayKind
    element: int  # branch id, or bus id for machine relays
    nominal: tuple[Zone, ...]
    hidden: tuple[Zone, ...]
    end_bus: int | None = None  # bus the branch relay sits at
    gen: int | None = None  # generator watched by a machine relay
    has_hidden_failure: bool = False
    timers: list[float] = field(default_factory=list)
    u: int = 0
    trip_zone: str | None = None

    def __post_init__(self):
        if not self.timers:
            self.timers = [0.0] * len(self.nominal)

    @property
    def zones(self) -> tuple[Zone, ...]:
        return self.hidden if self.has_hidden_failure else self.nominal

    @property
    def protects_branch(self) -> bool:
        return self.kind in BRANCH_KINDS

    def time_to_trip(self) -> float:
        """Smallest remaining delay over zones whose timer is running."""
        left = [z.delay - t for z, t in zip(self.zones, self.timers) if t > 0]
        return min(left) if left else math.inf


# -- zone construction --------------------------------------------------------


def nominal_zones(kind: RelayKind, p: dict[str, float], z_line: complex = 0j,
                  rating_pu: float = 0.0) -> tuple[Zone, ...]:
    if kind is RelayKind.MHO:
        return tuple(Zone(name=f"zone{k}", delay=p[f"zone{k}_delay"],
                          reach=p[f"zone{k}_reach"] * z_line) for k in (1, 2, 3))
    if kind is RelayKind.OVERCURRENT:
        return (Zone("pickup", p["delay"], hi=p["pickup"] * rating_pu, directional=True),)
    if kind is RelayKind.OUT_OF_STEP:
        return (Zone("angle", p["delay"], hi=p["angle"]),)
    if kind is RelayKind.FREQUENCY:
        return (Zone("band", p["delay"], lo=p["low"], hi=p["high"]),)
    if kind is RelayKind.UNDER_VOLTAGE:
        return (Zone("pickup", p["delay"], lo=p["pickup"]),)
    if kind is RelayKind.FIELD:
        return (Zone("pickup", p["delay"], hi=p["pickup"]),)
    raise ValueError(kind)


def hidden_zones(kind: RelayKind, zones: Sequence[Zone]) -> tuple[Zone, ...]:
    """The zone set of a relay with a defective contact.

    Overcurrent loses its directional element, mho loses its zone-3 timer,
    everything else operates with half its delay.
    """
    if kind is RelayKind.OVERCURRENT:
        return tuple(replace(z, directional=False) for z in zones)
    if kind is RelayKind.MHO:
        return tuple(replace(z, delay=0.0) if z.name == "zone3" else z for z in zones)
    return tuple(replace(z, delay=z.delay / 2) for z in zones)


def _settings_for(net: Network, kind: RelayKind, element: int) -> dict[str, float] | None:
    p = dict(DEFAULT_SETTINGS[kind])
    enabled = True
    for rs in net.relay_settings:
        if rs.kind is not None and rs.kind != kind.value:
            continue
        if rs.element is not None and rs.element != element:
            continue
        for key, val in rs.params:
            if key == "enabled":
                enabled = bool(val)
            elif key in p:
                p[key] = val
            elif rs.kind is not None:
                raise ValueError(f"unknown {kind.value} setting {key!r}")
    return p if enabled else None


def build_relays(net: Network) -> list[Relay]:
    """One relay per kind at each branch end and at each generator.

    Order (which fixes relay ids and therefore hidden-failure draws): branches
    in case order, from end then to end, mho then overcurrent; then
    generators in case order.
    """
    relays: list[Relay] = []
    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            for kind in BRANCH_KINDS:
                p = _settings_for(net, kind, br.id)
                if p is None:
                    continue
                zones = nominal_zones(kind, p, z_line=br.z, rating_pu=br.rating_mva / net.base_mva)
                relays.append(Relay(id=len(relays), kind=kind, element=br.id, end_bus=end,
                                    nominal=zones, hidden=hidden_zones(kind, zones)))
    for g in net.generators:
        for kind in MACHINE_KINDS:
            p = _settings_for(net, kind, g.bus)
            if p is None:
                continue
            zones = nominal_zones(kind, p)
            relays.append(Relay(id=len(relays), kind=kind, element=g.bus, gen=g.id,
                                nominal=zones, hidden=hidden_zones(kind, zones)))
    return relays


# -- hidden failures ---------------------------------------------------------


def sample_hidden_failures(relays: Sequence[Relay], p: float, seed: int,
                           kinds: Iterable[RelayKind | str] | None = None) -> frozenset[int]:
    """Relay ids drawn independently with probability ``p``.

    One uniform number is drawn per relay in list order, so the result only
    depends on (relay order, p, seed). ``kinds`` restricts eligibility
    without changing the draws.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"probability must be in [0, 1], got {p}")
    rng = np.random.default_rng(seed)
    draws = rng.random(len(relays))
    allowed = None if kinds is None else {RelayKind(k) for k in kinds}
    return frozenset(r.id for r, x in zip(relays, draws)
                     if x < p and (allowed is None or r.kind in allowed))


def apply_hidden_failure(relay: Relay) -> Relay:
    return replace(relay, has_hidden_failure=True, timers=[0.0] * len(relay.nominal),
                   u=0, trip_zone=None)


def arm_relays(net: Network, hidden: Iterable[int] = ()) -> list[Relay]:
    hidden = set(hidden)
    relays = build_relays(net)
    unknown = hidden - {r.id for r in relays}
    if unknown:
        raise ValueError(f"hidden-failure set names unknown relays {sorted(unknown)}")
    return [apply_hidden_failure(r) if r.id in hidden else r for r in relays]


# -- measurement -------------------------------------------------------------


def _branch_table(net: Network):
    """Pi-model admittances of every live branch, cached on the network object."""
    tab = net.__dict__.get("_relay_branch_table")
    if tab is None:
        live = net.live_branches
        ys = np.array([branch_admittances(br) for br in live], dtype=complex).reshape(-1, 4)
        tab = ({br.id: k for k, br in enumerate(live)},
               np.array([net.bus_position[br.from_bus] for br in live], dtype=int),
               np.array([net.bus_position[br.to_bus] for br in live], dtype=int),
               ys, tuple(br.from_bus for br in live))
        net.__dict__["_relay_branch_table"] = tab
    return tab


class _Context:
    """Per-step quantities shared by all relays."""

    def __init__(self, state: SystemState, net: Network):
        c = state.const
        self.gen_pos = {gid: k for k, gid in enumerate(c.gen_ids)}
        acc: dict[int, list[float]] = {}
        for g in net.live_generators:
            k = self.gen_pos[g.id]
            a = acc.setdefault(net.island_of[g.bus], [0.0, 0.0])
            a[0] += c.H[k] * state.delta[k]
            a[1] += c.H[k]
        self.coi = {isl: hd / h for isl, (hd, h) in acc.items()}
        self.live_gens = {g.id for g in net.live_generators}
        self.branch_index, fpos, tpos, ys, self.from_bus = _branch_table(net)
        vf = state.v[fpos]
        vt = state.v[tpos]
        self.vf, self.vt = vf, vt
        self.i_from = ys[:, 0] * vf + ys[:, 1] * vt
        self.i_to = ys[:, 2] * vf + ys[:, 3] * vt


def _context(state: SystemState, net: Network) -> _Context:
    cached = state.__dict__.get("_relay_ctx")
    if cached is not None and cached[0] is net:
        return cached[1]
    ctx = _Context(state, net)
    state.__dict__["_relay_ctx"] = (net, ctx)
    return ctx


def coi_deviation(angles_deg: Sequence[float], inertias: Sequence[float]) -> list[float]:
    """Angle of each machine relative to the inertia-weighted mean, degrees."""
    a = np.asarray(angles_deg, dtype=float)
    h = np.asarray(inertias, dtype=float)
    return list(a - float(np.dot(h, a) / h.sum()))


def branch_end_current(net: Network, state: SystemState, branch_id: int, end_bus: int):
    """(V at the relay bus, current leaving that bus into the branch)."""
    br = net.branch(branch_id)
    yff, yft, ytf, ytt = branch_admittances(br)
    vf = state.v[net.bus_position[br.from_bus]]
    vt = state.v[net.bus_position[br.to_bus]]
    if end_bus == br.from_bus:
        return complex(vf), complex(yff * vf + yft * vt)
    return complex(vt), complex(ytf * vf + ytt * vt)


def measure(relay: Relay, state: SystemState, net: Network) -> Measurement | None:
    ctx = _context(state, net)
    kind = relay.kind
    if relay.protects_branch:
        k = ctx.branch_index.get(relay.element)
        if k is None:
            return None
        if relay.end_bus == ctx.from_bus[k]:
            v, i = complex(ctx.vf[k]), complex(ctx.i_from[k])
        else:
            v, i = complex(ctx.vt[k]), complex(ctx.i_to[k])
        if kind is RelayKind.MHO:
            if abs(i) < MIN_CURRENT:
                return None
            return Measurement(kind, v / i)
        return Measurement(kind, abs(i), forward=(v * i.conjugate()).real > 0)

    if relay.gen not in ctx.live_gens:
        return None
    k = ctx.gen_pos[relay.gen]
    if kind is RelayKind.OUT_OF_STEP:
        isl = net.island_of[relay.element]
        return Measurement(kind, abs(math.degrees(state.delta[k] - ctx.coi[isl])))
    if kind is RelayKind.FREQUENCY:
        key = min(net.islands[net.island_of[relay.element]])
        return Measurement(kind, state.island_frequency[key])
    if kind is RelayKind.UNDER_VOLTAGE:
        return Measurement(kind, abs(state.v[net.bus_position[relay.element]]))
    if kind is RelayKind.FIELD:
        return Measurement(kind, float(state.ifd[k]))
    raise ValueError(kind)


def evaluate(relay: Relay, measurement: Measurement | None, dt: float) -> int:
    """Advance zone timers by ``dt`` and latch the trip output."""
    if relay.u:
        return 1
    zones = relay.zones
    for k, zone in enumerate(zones):
        if measurement is not None and zone.contains(measurement):
            relay.timers[k] += dt
            if relay.timers[k] >= zone.delay - TIMER_EPS:
                relay.u = 1
                relay.trip_zone = zone.name
        else:
            relay.timers[k] = 0.0
    return relay.u


# -- under-frequency load shedding ---------------------------------------------


@dataclass(frozen=True)
class UflsAction:
    island: int  # smallest bus id of the island
    stage: int
    frequency: float
    load_ids: tuple[int, ...]
    shed_pu: float  # active demand removed at this stage, pu


def ufls(state: SystemState, net: Network) -> list[UflsAction]:
    """Stages that fire now: island frequency at or below a stage threshold
    and the stage not yet fired for the island's loads."""
    load_pos = {lid: k for k, lid in enumerate(state.const.load_ids)}
    by_island: dict[int, list] = {}
    for ld in net.live_loads:
        key = min(net.islands[net.island_of[ld.bus]])
        by_island.setdefault(key, []).append(ld)
    actions = []
    left = state.sheddable_left.copy()
    for key, loads in sorted(by_island.items()):
        f = state.island_frequency.get(key)
        if f is None:
            continue
        for s, (f_set, frac) in enumerate(net.ufls_stages):
            if f > f_set:
                continue
            pending = [ld for ld in loads if not state.ufls_fired[load_pos[ld.id], s]]
            if not pending:
                continue
            shed = 0.0
            for ld in pending:
                k = load_pos[ld.id]
                d = frac * left[k]
                left[k] -= d
                shed += d * ld.p
            actions.append(UflsAction(island=key, stage=s, frequency=float(f),
                                      load_ids=tuple(ld.id for ld in pending), shed_pu=shed))
    return actions


def apply_ufls(state: SystemState, net: Network, actions: Sequence[UflsAction]) -> SystemState:
    if not actions:
        return state
    new = state.copy()
    new._solver = state._solver
    load_pos = {lid: k for k, lid in enumerate(state.const.load_ids)}
    for a in sorted(actions, key=lambda a: (a.island, a.stage)):
        frac = net.ufls_stages[a.stage][1]
        for lid in a.load_ids:
            k = load_pos[lid]
            d = frac * new.sheddable_left[k]
            new.sheddable_left[k] -= d
            new.load_scale[k] -= d
            new.ufls_fired[k, a.stage] = True
    return new
