import math

import numpy as np
import pytest

from gridcascade.acpf import solve_ac
from gridcascade.dynamics import FaultSpec, apply_fault, init_dynamics, step
from gridcascade.netmodel import parse_case
from gridcascade.protection import (
    DEFAULT_SETTINGS, Measurement, Relay, RelayKind, UflsAction, apply_hidden_failure,
    apply_ufls, arm_relays, build_relays, coi_deviation, evaluate, hidden_zones, measure,
    nominal_zones, sample_hidden_failures, ufls,
)
from oracles import thales_inside

# bus 3 sits 40 % of the way along a 0.01+j0.1 line from bus 1 to bus 2; bus 4 hangs off
# bus 2 with nothing behind it
SPLIT_LINE = """BASE_MVA 100
BUS
1 slack 345
2 pq 345
3 pq 345
4 pq 345
BRANCH
1 1 3 0.004 0.04 0 300
2 3 2 0.006 0.06 0 300
3 2 4 0.01 0.1 0 300
GEN
1 1 0 -999 999 1.0 500 5 0 0.3
LOAD
1 2 50 10
"""


def make_relay(kind, rating_pu=1.0, z_line=0.01 + 0.1j, hidden=False):
    zones = nominal_zones(kind, DEFAULT_SETTINGS[kind], z_line=z_line, rating_pu=rating_pu)
    r = Relay(id=0, kind=kind, element=1, nominal=zones, hidden=hidden_zones(kind, zones))
    return apply_hidden_failure(r) if hidden else r


def steps_to_trip(relay, m, dt=0.01, limit=400):
    for k in range(1, limit + 1):
        if evaluate(relay, m, dt):
            return k
    return None


# -- measurement ---------------------------------------------------------------


def test_apparent_impedance_at_forty_percent():
    net = parse_case(SPLIT_LINE)
    st = init_dynamics(net, solve_ac(net))
    s = step(st, apply_fault(net, FaultSpec({3}, 0.0)), 0.01)
    relay = next(r for r in build_relays(net)
                 if r.kind is RelayKind.MHO and r.element == 1 and r.end_bus == 1)
    m = measure(relay, s, apply_fault(net, FaultSpec({3}, 0.0)))
    assert m.value == pytest.approx(0.004 + 0.04j, rel=1e-3)


def test_zero_current_gives_no_measurement():
    net = parse_case(SPLIT_LINE)
    st = init_dynamics(net, solve_ac(net))
    relay = next(r for r in build_relays(net)
                 if r.kind is RelayKind.MHO and r.element == 3 and r.end_bus == 2)
    assert measure(relay, st, net) is None


def test_coi_deviation():
    assert coi_deviation([0.0, 50.0], [1.0, 1.0]) == [-25.0, 25.0]


def test_overcurrent_direction_flags(star5):
    st = init_dynamics(star5, solve_ac(star5))
    oc = {r.end_bus: r for r in build_relays(star5)
          if r.kind is RelayKind.OVERCURRENT and r.element == 1}
    # generator bus 2 exports into branch 1, the hub end receives
    assert measure(oc[2], st, star5).forward is True
    assert measure(oc[1], st, star5).forward is False


def test_out_of_step_measurement_is_coi_deviation(star5):
    st = init_dynamics(star5, solve_ac(star5))
    oos = [r for r in build_relays(star5) if r.kind is RelayKind.OUT_OF_STEP]
    got = [measure(r, st, star5).value for r in oos]
    dev = coi_deviation(np.degrees(st.delta), st.const.H)
    assert got == pytest.approx([abs(d) for d in dev], abs=1e-12)


# -- evaluation ------------------------------------------------------------------


def test_zone1_trips_immediately():
    r = make_relay(RelayKind.MHO)
    assert evaluate(r, Measurement(RelayKind.MHO, 0.004 + 0.04j), 0.01) == 1
    assert r.trip_zone == "zone1"


def test_outside_zone3_resets_timers():
    r = make_relay(RelayKind.MHO)
    evaluate(r, Measurement(RelayKind.MHO, 0.011 + 0.11j), 0.01)  # zones 2 and 3, not 1
    assert r.timers[0] == 0 and r.timers[1] > 0 and r.timers[2] > 0
    assert evaluate(r, Measurement(RelayKind.MHO, 1.0 + 0.5j), 0.01) == 0
    assert r.timers == [0.0, 0.0, 0.0]


def test_none_measurement_never_trips():
    r = make_relay(RelayKind.MHO)
    assert steps_to_trip(r, None) is None


@pytest.mark.parametrize("angle, trips", [(181.0, True), (179.0, False)])
def test_out_of_step_threshold(angle, trips):
    r = make_relay(RelayKind.OUT_OF_STEP)
    assert evaluate(r, Measurement(RelayKind.OUT_OF_STEP, angle), 0.01) == int(trips)


def out_of_step_edges(eps=1e-9):
    """(trips just above 180 deg, trips just below)."""
    above = make_relay(RelayKind.OUT_OF_STEP)
    below = make_relay(RelayKind.OUT_OF_STEP)
    return (bool(evaluate(above, Measurement(RelayKind.OUT_OF_STEP, 180.0 + eps), 0.01)),
            bool(evaluate(below, Measurement(RelayKind.OUT_OF_STEP, 180.0 - eps), 0.01)))


def test_out_of_step_epsilon_edges():
    assert out_of_step_edges() == (True, False)


def directional_example(dt=0.01):
    """Reverse current at twice the rating: steps to trip for (hidden, healthy)."""
    m = Measurement(RelayKind.OVERCURRENT, 2.0, forward=False)
    hidden = make_relay(RelayKind.OVERCURRENT, hidden=True)
    healthy = make_relay(RelayKind.OVERCURRENT)
    return steps_to_trip(hidden, m, dt), steps_to_trip(healthy, m, dt)


def test_hidden_directional_overcurrent_trips_on_reverse_current():
    hidden, healthy = directional_example()
    assert hidden == 50  # 0.5 s at 10 ms
    assert healthy is None


def test_forward_overcurrent_trips_healthy_relay():
    r = make_relay(RelayKind.OVERCURRENT)
    assert steps_to_trip(r, Measurement(RelayKind.OVERCURRENT, 2.0, forward=True)) == 50


def test_hidden_mho_zone3_without_delay():
    z = 0.18 + 1.8j  # zone 3 only (reach 2.2 Z_L), outside zone 2
    m = Measurement(RelayKind.MHO, z * 0.1)
    healthy, hidden = make_relay(RelayKind.MHO), make_relay(RelayKind.MHO, hidden=True)
    assert steps_to_trip(hidden, m) == 1
    assert steps_to_trip(healthy, m) == 100


@pytest.mark.parametrize("kind", [RelayKind.FREQUENCY, RelayKind.UNDER_VOLTAGE, RelayKind.FIELD])
def test_other_hidden_relays_halve_delay(kind):
    base = make_relay(kind).zones[0]
    assert make_relay(kind, hidden=True).zones[0].delay == pytest.approx(base.delay / 2)


# -- mho geometry against brute force ---------------------------------------------


def mho_disagreements(n_per_zone=1000, seed=5):
    """Per zone: number of random impedances where the relay and Thales geometry disagree."""
    rng = np.random.default_rng(seed)
    z_line = 0.01 + 0.1j
    relay = make_relay(RelayKind.MHO, z_line=z_line)
    out = {}
    for zone in relay.zones:
        reach = zone.reach
        r = abs(reach)
        pts = (rng.uniform(-0.2, 1.2, n_per_zone) * reach.real
               + rng.uniform(-0.6, 0.6, n_per_zone) * r
               + 1j * (rng.uniform(-0.2, 1.2, n_per_zone) * reach.imag
                       + rng.uniform(-0.6, 0.6, n_per_zone) * r))
        bad = 0
        for z in pts:
            got = zone.contains(Measurement(RelayKind.MHO, complex(z)))
            bad += got != thales_inside(complex(z), reach)
        out[zone.name] = bad
    return out


def test_mho_matches_thales_geometry():
    assert mho_disagreements() == {"zone1": 0, "zone2": 0, "zone3": 0}


# -- hidden failures -----------------------------------------------------------------


def test_sampling_edges(ieee39):
    relays = build_relays(ieee39)
    assert sample_hidden_failures(relays, 0.0, 1) == frozenset()
    assert sample_hidden_failures(relays, 1.0, 1) == frozenset(r.id for r in relays)
    assert sample_hidden_failures(relays, 0.3, 9) == sample_hidden_failures(relays, 0.3, 9)
    assert sample_hidden_failures(relays, 0.3, 9) != sample_hidden_failures(relays, 0.3, 10)
    only = sample_hidden_failures(relays, 1.0, 1, kinds=["mho_distance"])
    assert {relays[i].kind for i in only} == {RelayKind.MHO}
    with pytest.raises(ValueError):
        sample_hidden_failures(relays, 1.5, 1)


def test_arm_relays_rejects_unknown_ids(star5):
    with pytest.raises(ValueError):
        arm_relays(star5, hidden=[10_000])
    armed = arm_relays(star5, hidden=[0])
    assert armed[0].has_hidden_failure and not armed[1].has_hidden_failure


def random_measurement(kind, rng):
    if kind is RelayKind.MHO:
        return Measurement(kind, complex(rng.uniform(-0.1, 0.4), rng.uniform(-0.1, 0.4)))
    if kind is RelayKind.OVERCURRENT:
        return Measurement(kind, rng.uniform(0, 4), forward=bool(rng.integers(2)))
    if kind is RelayKind.OUT_OF_STEP:
        return Measurement(kind, rng.uniform(0, 360))
    if kind is RelayKind.FREQUENCY:
        return Measurement(kind, rng.uniform(54, 66))
    if kind is RelayKind.UNDER_VOLTAGE:
        return Measurement(kind, rng.uniform(0, 1.2))
    return Measurement(kind, rng.uniform(0, 3))


def containment_violations(n=10_000, seed=17, dt=0.05, horizon=2.5):
    """Count samples where the nominal relay trips but its hidden-failure twin does not trip
    at least as early, with the measurement held for ``horizon`` seconds."""
    rng = np.random.default_rng(seed)
    kinds = list(RelayKind)
    limit = int(round(horizon / dt))
    bad = 0
    for k in range(n):
        kind = kinds[k % len(kinds)]
        m = random_measurement(kind, rng)
        nominal = steps_to_trip(make_relay(kind), m, dt, limit)
        if nominal is None:
            continue
        hidden = steps_to_trip(make_relay(kind, hidden=True), m, dt, limit)
        bad += hidden is None or hidden > nominal
    return bad


def test_hidden_zone_contains_nominal_zone():
    assert containment_violations() == 0


# -- UFLS ------------------------------------------------------------------------


def ufls_state(net, f):
    st = init_dynamics(net, solve_ac(net))
    st.island_frequency = {k: f for k in st.island_frequency}
    return st


def test_ufls_stage_table(toy3):
    assert ufls(ufls_state(toy3, 60.0), toy3) == []
    acts = ufls(ufls_state(toy3, 59.0), toy3)
    assert [a.stage for a in acts] == [0]
    st = apply_ufls(ufls_state(toy3, 59.0), toy3, acts)
    ld = toy3.loads[0]
    assert st.load_scale[0] == pytest.approx(1 - 0.1 * ld.sheddable_fraction)


def test_ufls_compounds_to_27_1_percent(toy3):
    st = ufls_state(toy3, 58.4)
    acts = ufls(st, toy3)
    assert [a.stage for a in acts] == [0, 1, 2]
    st = apply_ufls(st, toy3, acts)
    frac = toy3.loads[0].sheddable_fraction
    assert 1 - st.load_scale[0] == pytest.approx(0.271 * frac, abs=1e-12)
    # nothing left to fire at the same frequency
    assert ufls(st, toy3) == []


def test_ufls_action_reports_shed_power(toy3):
    acts = ufls(ufls_state(toy3, 59.0), toy3)
    assert isinstance(acts[0], UflsAction)
    frac = toy3.loads[0].sheddable_fraction
    assert acts[0].shed_pu == pytest.approx(0.1 * frac * toy3.loads[0].p)


def test_relay_order_is_stable(ieee39):
    a = [(r.id, r.kind, r.element, r.end_bus, r.gen) for r in build_relays(ieee39)]
    b = [(r.id, r.kind, r.element, r.end_bus, r.gen) for r in build_relays(ieee39)]
    assert a == b
    assert len(a) == 46 * 2 * 2 + 10 * 4
    assert not math.isinf(min(z.delay for r in build_relays(ieee39) for z in r.zones))
