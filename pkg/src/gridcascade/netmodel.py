"""Grid data model, case-file I/O and graph helpers.

A :class:`Network` is an immutable snapshot. Topology changes never delete an
element; they produce a new snapshot in which the element carries a tripped
status, so event logs can keep referring to it.

Case file layout (whitespace separated, ``#`` starts a comment)::

    BASE_MVA 100
    FREQ 60                       # optional, nominal frequency in Hz

    BUS
    # id  type   kv     [gs_mw  bs_mvar]
      1   slack  345
    BRANCH
    # id from to  r      x      b      rating_mva [tap  kind]
      1   1    2  0.0    0.1    0.0    100         1.0  line
    GEN
    # id bus p_mw q_min q_max v_set p_max_mw h_s  d_pu  xd_prime
      1  1   0    -99   99    1.0   200      5.0  0.0   0.3
    LOAD
    # id bus p_mw q_mvar [sheddable_fraction]
      1  2   100  0      0.5
    DYN
    GOV   <gen|*> droop=0.05 t_gov=0.5      # or: GOV <gen|*> off
    EXC   <gen|*> ka=10 t_ex=0.2 ceiling=2  # or: EXC <gen|*> off
    RELAY <kind|*> <element|*> key=value ...
    UFLS  59.3:0.1 58.9:0.1 58.5:0.1     (or UFLS off)

Impedances in the BRANCH and GEN tables are already per unit on ``BASE_MVA``;
powers are in MW / MVAr and converted on load.  ``h_s`` is the inertia
constant on the system base.  ``droop`` in a GOV line is on the machine rating
(``p_max``) and is converted to the system base on load.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


class CaseFormatError(ValueError):
    """Malformed case file; ``line`` is 1-based or None."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class BusType(str, Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class BusStatus(str, Enum):
    IN_SERVICE = "in_service"
    TRIPPED = "tripped"
    ISOLATED = "isolated"


class BranchStatus(str, Enum):
    IN_SERVICE = "in_service"
    TRIPPED = "tripped"


class BranchKind(str, Enum):
    LINE = "line"
    TRANSFORMER = "transformer"


@dataclass(frozen=True)
class Bus:
    id: int
    type: BusType
    voltage_kv: float
    gs: float = 0.0  # shunt conductance, pu at 1 pu voltage
    bs: float = 0.0
    status: BusStatus = BusStatus.IN_SERVICE

    @property
    def in_service(self) -> bool:
        return self.status is BusStatus.IN_SERVICE


@dataclass(frozen=True)
class Branch:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b_shunt: float
    rating_mva: float
    tap: float = 1.0
    kind: BranchKind = BranchKind.LINE
    status: BranchStatus = BranchStatus.IN_SERVICE

    @property
    def in_service(self) -> bool:
        return self.status is BranchStatus.IN_SERVICE

    @property
    def z(self) -> complex:
        return complex(self.r, self.x)


@dataclass(frozen=True)
class GovernorParams:
    droop: float  # pu speed per pu power, system base
    t_gov: float  # s


@dataclass(frozen=True)
class ExciterParams:
    k_a: float
    t_ex: float  # s
    ceiling: float  # field voltage ceiling as a multiple of the initial field voltage


@dataclass(frozen=True)
class Generator:
    id: int
    bus: int
    p_set: float
    q_min: float
    q_max: float
    v_set: float
    p_max: float
    inertia_h: float
    damping_d: float
    xd_prime: float
    governor: GovernorParams | None = None
    exciter: ExciterParams | None = None
    in_service: bool = True


@dataclass(frozen=True)
class Load:
    id: int
    bus: int
    p: float
    q: float
    sheddable_fraction: float = 0.5
    in_service: bool = True


@dataclass(frozen=True)
class RelaySetting:
    """One RELAY line of the DYN section; ``None`` kind/element means ``*``."""

    kind: str | None
    element: int | None
    params: tuple[tuple[str, float], ...] = ()


DEFAULT_UFLS_STAGES: tuple[tuple[float, float], ...] = ((59.3, 0.1), (58.9, 0.1), (58.5, 0.1))
DEFAULT_GOVERNOR = {"droop": 0.05, "t_gov": 0.5}
DEFAULT_EXCITER = {"ka": 10.0, "t_ex": 0.2, "ceiling": 2.0}


@dataclass(frozen=True)
class Network:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    loads: tuple[Load, ...]
    base_mva: float = 100.0
    frequency: float = 60.0
    relay_settings: tuple[RelaySetting, ...] = ()
    ufls_stages: tuple[tuple[float, float], ...] = DEFAULT_UFLS_STAGES
    faulted_buses: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "loads", tuple(self.loads))
        object.__setattr__(self, "faulted_buses", frozenset(self.faulted_buses))

    # -- lookups -----------------------------------------------------------

    @cached_property
    def bus_position(self) -> dict[int, int]:
        """Bus id -> row in ``buses``."""
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def branch_position(self) -> dict[int, int]:
        return {br.id: i for i, br in enumerate(self.branches)}

    def bus(self, bus_id: int) -> Bus:
        return self.buses[self.bus_position[bus_id]]

    def branch(self, branch_id: int) -> Branch:
        return self.branches[self.branch_position[branch_id]]

    @cached_property
    def in_service_bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses if b.in_service)

    @property
    def n_in_service(self) -> int:
        return len(self.in_service_bus_ids)

    @cached_property
    def live_branches(self) -> tuple[Branch, ...]:
        """In-service branches whose both endpoints are in service."""
        alive = set(self.in_service_bus_ids)
        return tuple(
            br for br in self.branches
            if br.in_service and br.from_bus in alive and br.to_bus in alive
        )

    @cached_property
    def live_generators(self) -> tuple[Generator, ...]:
        alive = set(self.in_service_bus_ids)
        return tuple(g for g in self.generators if g.in_service and g.bus in alive)

    @cached_property
    def live_loads(self) -> tuple[Load, ...]:
        alive = set(self.in_service_bus_ids)
        return tuple(ld for ld in self.loads if ld.in_service and ld.bus in alive)

    @cached_property
    def islands(self) -> tuple[frozenset[int], ...]:
        return tuple(energized_islands(self))

    @cached_property
    def island_of(self) -> dict[int, int]:
        """Bus id -> index into ``islands``."""
        return {b: k for k, isl in enumerate(self.islands) for b in isl}

    def degree(self) -> dict[int, int]:
        deg = {b: 0 for b in self.in_service_bus_ids}
        for br in self.live_branches:
            deg[br.from_bus] += 1
            deg[br.to_bus] += 1
        return deg


# -- graph operations -------------------------------------------------------


def energized_islands(net: Network) -> list[frozenset[int]]:
    """Connected components of in-service buses over in-service branches.

    Islands are ordered by their smallest bus id, which keeps downstream
    iteration deterministic.
    """
    ids = list(net.in_service_bus_ids)
    if not ids:
        return []
    pos = {b: i for i, b in enumerate(ids)}
    rows = [pos[br.from_bus] for br in net.live_branches]
    cols = [pos[br.to_bus] for br in net.live_branches]
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(ids), len(ids)))
    _, labels = connected_components(adj, directed=False)
    groups: dict[int, set[int]] = {}
    for b, lab in zip(ids, labels):
        groups.setdefault(int(lab), set()).add(b)
    return sorted((frozenset(g) for g in groups.values()), key=min)


def isolated_nodes(net: Network) -> set[int]:
    return {b for b, d in net.degree().items() if d == 0}


def remove_elements(net: Network, branches: Iterable[int] = (), buses: Iterable[int] = (),
                    bus_status: BusStatus = BusStatus.TRIPPED) -> Network:
    """Return a copy of ``net`` with the given branches and buses out of service.

    Generators and loads attached to a removed bus go out of service with it.
    Branches incident to a removed bus are left alone; callers decide whether
    those count as separate outages. Already-removed ids are a no-op.
    """
    branches = set(branches)
    buses = set(buses)
    unknown = [i for i in branches if i not in net.branch_position]
    unknown += [i for i in buses if i not in net.bus_position]
    if unknown:
        raise KeyError(f"unknown element id(s): {sorted(unknown)}")
    if not branches and not buses:
        return net

    new_branches = tuple(
        replace(br, status=BranchStatus.TRIPPED) if br.id in branches and br.in_service else br
        for br in net.branches
    )
    new_buses = tuple(
        replace(b, status=bus_status) if b.id in buses and b.in_service else b
        for b in net.buses
    )
    new_gens = tuple(
        replace(g, in_service=False) if g.bus in buses and g.in_service else g
        for g in net.generators
    )
    new_loads = tuple(
        replace(ld, in_service=False) if ld.bus in buses and ld.in_service else ld
        for ld in net.loads
    )
    return replace(net, buses=new_buses, branches=new_branches,
                   generators=new_gens, loads=new_loads,
                   faulted_buses=net.faulted_buses - buses)


def trip_generators(net: Network, gen_ids: Iterable[int]) -> Network:
    gen_ids = set(gen_ids)
    return replace(net, generators=tuple(
        replace(g, in_service=False) if g.id in gen_ids else g for g in net.generators))


# -- validation -------------------------------------------------------------


def validate(net: Network) -> None:
    if not net.base_mva > 0:
        raise CaseFormatError(f"base MVA must be positive, got {net.base_mva}")
    _unique([b.id for b in net.buses], "bus")
    _unique([br.id for br in net.branches], "branch")
    _unique([g.id for g in net.generators], "generator")
    _unique([ld.id for ld in net.loads], "load")
    bus_ids = set(net.bus_position)
    for b in net.buses:
        if not b.voltage_kv > 0:
            raise CaseFormatError(f"bus {b.id}: voltage_kv must be positive")
    for br in net.branches:
        for end in (br.from_bus, br.to_bus):
            if end not in bus_ids:
                raise CaseFormatError(f"branch {br.id} references unknown bus {end}")
        if br.x == 0:
            raise CaseFormatError(f"branch {br.id}: reactance must be nonzero")
        if not br.rating_mva > 0:
            raise CaseFormatError(f"branch {br.id}: rating must be positive")
        if not br.tap > 0:
            raise CaseFormatError(f"branch {br.id}: tap must be positive")
    for g in net.generators:
        if g.bus not in bus_ids:
            raise CaseFormatError(f"generator {g.id} references unknown bus {g.bus}")
        if g.in_service and not g.inertia_h > 0:
            raise CaseFormatError(f"generator {g.id}: inertia must be positive")
        if g.xd_prime <= 0:
            raise CaseFormatError(f"generator {g.id}: xd_prime must be positive")
    for ld in net.loads:
        if ld.bus not in bus_ids:
            raise CaseFormatError(f"load {ld.id} references unknown bus {ld.bus}")
        if ld.p < 0:
            raise CaseFormatError(f"load {ld.id}: active demand must be nonnegative")
        if not 0.0 <= ld.sheddable_fraction <= 1.0:
            raise CaseFormatError(f"load {ld.id}: sheddable_fraction outside [0, 1]")
    gen_buses = {g.bus for g in net.live_generators}
    load_buses = {ld.bus for ld in net.live_loads}
    for isl in net.islands:
        if isl & load_buses and not isl & gen_buses:
            raise CaseFormatError(f"island containing bus {min(isl)} has load but no generator")


def _unique(ids: list[int], what: str) -> None:
    seen = set()
    for i in ids:
        if i in seen:
            raise CaseFormatError(f"duplicate {what} id {i}")
        seen.add(i)


# -- parsing ---------------------------------------------------------------

_SECTIONS = ("BUS", "BRANCH", "GEN", "LOAD", "DYN")


def load_case(path: str | Path) -> Network:
    path = Path(path)
    return parse_case(path.read_text(encoding="utf-8"))


def parse_case(text: str) -> Network:
    base_mva = 100.0
    freq = 60.0
    section = None
    rows: dict[str, list[tuple[int, list[str]]]] = {s: [] for s in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0].upper()
        if head == "BASE_MVA":
            base_mva = _num(tokens, 1, lineno)
            continue
        if head == "FREQ":
            freq = _num(tokens, 1, lineno)
            continue
        if head in _SECTIONS and len(tokens) == 1:
            section = head
            continue
        if section is None:
            raise CaseFormatError(f"data outside of a section: {raw.strip()!r}", lineno)
        rows[section].append((lineno, tokens))

    if not base_mva > 0:
        raise CaseFormatError(f"base MVA must be positive, got {base_mva}")

    buses = [_parse_bus(t, n, base_mva) for n, t in rows["BUS"]]
    branches = [_parse_branch(t, n) for n, t in rows["BRANCH"]]
    gens = [_parse_gen(t, n, base_mva) for n, t in rows["GEN"]]
    loads = [_parse_load(t, n, base_mva) for n, t in rows["LOAD"]]
    gens, relays, ufls = _apply_dyn(rows["DYN"], gens)
    net = Network(buses=tuple(buses), branches=tuple(branches), generators=tuple(gens),
                  loads=tuple(loads), base_mva=base_mva, frequency=freq,
                  relay_settings=tuple(relays), ufls_stages=ufls)
    validate(net)
    return net


def _num(tokens: list[str], k: int, lineno: int) -> float:
    try:
        return float(tokens[k])
    except IndexError:
        raise CaseFormatError(f"missing column {k + 1}", lineno) from None
    except ValueError:
        raise CaseFormatError(f"column {k + 1}: not a number: {tokens[k]!r}", lineno) from None


def _int(tokens: list[str], k: int, lineno: int) -> int:
    v = _num(tokens, k, lineno)
    if v != int(v):
        raise CaseFormatError(f"column {k + 1}: expected an integer, got {tokens[k]!r}", lineno)
    return int(v)


def _parse_bus(t, n, base):
    if len(t) not in (3, 5):
        raise CaseFormatError(f"BUS row needs 3 or 5 columns, got {len(t)}", n)
    try:
        btype = BusType(t[1].lower())
    except ValueError:
        raise CaseFormatError(f"unknown bus type {t[1]!r}", n) from None
    gs = _num(t, 3, n) / base if len(t) == 5 else 0.0
    bs = _num(t, 4, n) / base if len(t) == 5 else 0.0
    return Bus(id=_int(t, 0, n), type=btype, voltage_kv=_num(t, 2, n), gs=gs, bs=bs)


def _parse_branch(t, n):
    if len(t) not in (7, 9):
        raise CaseFormatError(f"BRANCH row needs 7 or 9 columns, got {len(t)}", n)
    tap, kind = 1.0, BranchKind.LINE
    if len(t) == 9:
        tap = _num(t, 7, n)
        try:
            kind = BranchKind(t[8].lower())
        except ValueError:
            raise CaseFormatError(f"unknown branch kind {t[8]!r}", n) from None
    return Branch(id=_int(t, 0, n), from_bus=_int(t, 1, n), to_bus=_int(t, 2, n),
                  r=_num(t, 3, n), x=_num(t, 4, n), b_shunt=_num(t, 5, n),
                  rating_mva=_num(t, 6, n), tap=tap, kind=kind)


def _parse_gen(t, n, base):
    if len(t) != 10:
        raise CaseFormatError(f"GEN row needs 10 columns, got {len(t)}", n)
    return Generator(id=_int(t, 0, n), bus=_int(t, 1, n), p_set=_num(t, 2, n) / base,
                     q_min=_num(t, 3, n) / base, q_max=_num(t, 4, n) / base,
                     v_set=_num(t, 5, n), p_max=_num(t, 6, n) / base,
                     inertia_h=_num(t, 7, n), damping_d=_num(t, 8, n), xd_prime=_num(t, 9, n),
                     governor=None, exciter=None)


def _parse_load(t, n, base):
    if len(t) not in (4, 5):
        raise CaseFormatError(f"LOAD row needs 4 or 5 columns, got {len(t)}", n)
    frac = _num(t, 4, n) if len(t) == 5 else 0.5
    return Load(id=_int(t, 0, n), bus=_int(t, 1, n), p=_num(t, 2, n) / base,
                q=_num(t, 3, n) / base, sheddable_fraction=frac)


def _kv(tokens: list[str], n: int) -> dict[str, float]:
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise CaseFormatError(f"expected key=value, got {tok!r}", n)
        key, val = tok.split("=", 1)
        try:
            out[key.lower()] = float(val)
        except ValueError:
            raise CaseFormatError(f"{key}: not a number: {val!r}", n) from None
    return out


def _target(tok: str, n: int) -> int | None:
    if tok == "*":
        return None
    try:
        return int(tok)
    except ValueError:
        raise CaseFormatError(f"expected an id or '*', got {tok!r}", n) from None


def _apply_dyn(rows, gens):
    gov: dict[int, dict | None] = {g.id: dict(DEFAULT_GOVERNOR) for g in gens}
    exc: dict[int, dict | None] = {g.id: dict(DEFAULT_EXCITER) for g in gens}
    relays: list[RelaySetting] = []
    ufls = DEFAULT_UFLS_STAGES
    gen_ids = {g.id for g in gens}
    for n, t in rows:
        head = t[0].upper()
        if head in ("GOV", "EXC"):
            if len(t) < 2:
                raise CaseFormatError(f"{head} needs a generator id or '*'", n)
            who = _target(t[1], n)
            if who is not None and who not in gen_ids:
                raise CaseFormatError(f"{head} references unknown generator {who}", n)
            table = gov if head == "GOV" else exc
            keys = DEFAULT_GOVERNOR if head == "GOV" else DEFAULT_EXCITER
            targets = gen_ids if who is None else {who}
            if len(t) == 3 and t[2].lower() == "off":
                for g in targets:
                    table[g] = None
                continue
            params = _kv(t[2:], n)
            bad = set(params) - set(keys)
            if bad:
                raise CaseFormatError(f"{head}: unknown parameter(s) {sorted(bad)}", n)
            for g in targets:
                table[g] = {**(table[g] or keys), **params}
        elif head == "RELAY":
            if len(t) < 3:
                raise CaseFormatError("RELAY needs a kind and an element", n)
            kind = None if t[1] == "*" else t[1].lower()
            relays.append(RelaySetting(kind=kind, element=_target(t[2], n),
                                       params=tuple(_kv(t[3:], n).items())))
        elif head == "UFLS":
            stages = []
            for tok in t[1:] if t[1:] != ["off"] else ():
                try:
                    f, frac = tok.split(":")
                    stages.append((float(f), float(frac)))
                except ValueError:
                    raise CaseFormatError(f"UFLS stage must be freq:fraction, got {tok!r}", n) from None
            ufls = tuple(sorted(stages, reverse=True))
        else:
            raise CaseFormatError(f"unknown DYN record {t[0]!r}", n)

    out = []
    for g in gens:
        gp, ep = gov[g.id], exc[g.id]
        governor = None
        if gp is not None:
            if g.p_max <= 0:
                raise CaseFormatError(f"generator {g.id}: governor needs p_max > 0")
            governor = GovernorParams(droop=gp["droop"] / g.p_max, t_gov=gp["t_gov"])
        exciter = None if ep is None else ExciterParams(k_a=ep["ka"], t_ex=ep["t_ex"],
                                                        ceiling=ep["ceiling"])
        out.append(replace(g, governor=governor, exciter=exciter))
    return out, relays, ufls


# -- writing ---------------------------------------------------------------


def _fmt_scaled(v: float, base: float) -> str:
    """Shortest text for v*base that reads back to exactly v after dividing by base."""
    m = v * base
    for cand in (m, *_neighbours(m)):
        s = repr(float(cand))
        if float(s) / base == v:
            return s
    return repr(m)


def _neighbours(m: float, k: int = 4):
    lo = hi = m
    for _ in range(k):
        lo = np.nextafter(lo, -math.inf)
        hi = np.nextafter(hi, math.inf)
        yield lo
        yield hi


def format_case(net: Network) -> str:
    base = net.base_mva
    out = [f"BASE_MVA {net.base_mva!r}", f"FREQ {net.frequency!r}", "", "BUS"]
    for b in net.buses:
        out.append(f"{b.id} {b.type.value} {b.voltage_kv!r} "
                   f"{_fmt_scaled(b.gs, base)} {_fmt_scaled(b.bs, base)}")
    out += ["", "BRANCH"]
    for br in net.branches:
        out.append(f"{br.id} {br.from_bus} {br.to_bus} {br.r!r} {br.x!r} {br.b_shunt!r} "
                   f"{br.rating_mva!r} {br.tap!r} {br.kind.value}")
    out += ["", "GEN"]
    for g in net.generators:
        out.append(f"{g.id} {g.bus} {_fmt_scaled(g.p_set, base)} {_fmt_scaled(g.q_min, base)} "
                   f"{_fmt_scaled(g.q_max, base)} {g.v_set!r} {_fmt_scaled(g.p_max, base)} "
                   f"{g.inertia_h!r} {g.damping_d!r} {g.xd_prime!r}")
    out += ["", "LOAD"]
    for ld in net.loads:
        out.append(f"{ld.id} {ld.bus} {_fmt_scaled(ld.p, base)} {_fmt_scaled(ld.q, base)} "
                   f"{ld.sheddable_fraction!r}")
    out += ["", "DYN"]
    for g in net.generators:
        if g.governor is None:
            out.append(f"GOV {g.id} off")
        else:
            droop = g.governor.droop * g.p_max
            if droop / g.p_max != g.governor.droop:
                droop = next((c for c in _neighbours(droop) if c / g.p_max == g.governor.droop),
                             droop)
            out.append(f"GOV {g.id} droop={float(droop)!r} t_gov={g.governor.t_gov!r}")
        if g.exciter is None:
            out.append(f"EXC {g.id} off")
        else:
            e = g.exciter
            out.append(f"EXC {g.id} ka={e.k_a!r} t_ex={e.t_ex!r} ceiling={e.ceiling!r}")
    for rs in net.relay_settings:
        kv = " ".join(f"{k}={v!r}" for k, v in rs.params)
        elem = "*" if rs.element is None else str(rs.element)
        out.append(f"RELAY {rs.kind or '*'} {elem} {kv}".rstrip())
    if net.ufls_stages:
        out.append("UFLS " + " ".join(f"{f!r}:{s!r}" for f, s in net.ufls_stages))
    else:
        out.append("UFLS off")
    return "\n".join(out) + "\n"


def write_case(net: Network, path: str | Path) -> None:
    Path(path).write_text(format_case(net), encoding="utf-8")


def totals(net: Network) -> Mapping[str, float]:
    """Scheduled generation and demand of the in-service elements, in pu."""
    return {
        "load_p": sum(ld.p for ld in net.live_loads),
        "gen_p": sum(g.p_set for g in net.live_generators),
        "gen_capacity": sum(g.p_max for g in net.live_generators),
    }
