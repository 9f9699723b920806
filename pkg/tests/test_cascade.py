import numpy as np
import pytest

from gridcascade.acpf import solve_ac
from gridcascade.cascade import (
    CAPACITY_FRACTION, Cause, account_outages, detect_collapse, run_cascade,
)
from gridcascade.dynamics import init_dynamics, step
from gridcascade.netmodel import remove_elements, trip_generators
from gridcascade.scenario import AttackType, Scenario
from handtrace import star5_facts, star5_hidden_trace, star5_trace, toy3_trace


def scenario(targets, t_end=10.0, **kw):
    kind = AttackType.TYPE2_TARGETED if targets else AttackType.NONE
    return Scenario("t", frozenset(targets), attack_type=kind, t_end=t_end, **kw)


def records(result):
    return [e.to_record() for e in result.events]


# -- hand traces ---------------------------------------------------------------------


def test_toy3_matches_hand_trace(toy3):
    dn, c, events = toy3_trace()
    res = run_cascade(toy3, scenario({2}))
    assert (res.delta_n, res.c) == (dn, c)
    assert records(res) == events


def test_star5_facts_behind_the_trace(star5):
    f = star5_facts(star5, init_dynamics(star5, solve_ac(star5)))
    assert f["i_pre"] < f["pickup"]  # quiet before the attack
    assert f["i_fault"] > f["pickup"] and f["fault_forward"]
    assert f["i_post"] > f["pickup"] and f["post_forward"]
    assert f["z_fault_in_zone3"] and not f["z_fault_in_zone2"]
    assert not f["z_post_in_zone3"]
    assert f["min_freq_hz"] > 57.0  # the frequency relays cannot act first


def test_star5_matches_hand_trace(star5):
    dn, c, events = star5_trace()
    res = run_cascade(star5, scenario({3}))
    assert (res.delta_n, res.c) == (dn, c)
    assert records(res) == events


def test_star5_hidden_mho_matches_hand_trace(star5):
    dn, c, events = star5_hidden_trace()
    res = run_cascade(star5, scenario({3}), hidden={0})
    assert (res.delta_n, res.c) == (dn, c)
    assert records(res) == events


# -- basic behaviour -------------------------------------------------------------------


def test_no_attack_no_outages(toy3):
    res = run_cascade(toy3, scenario(set(), t_end=3.0))
    assert (res.delta_n, res.c, res.events) == (0, 0, [])
    assert res.t_stop == pytest.approx(3.0)
    assert np.allclose(res.series.load_mw, res.series.load_mw[0])


def test_unknown_target_rejected(toy3):
    with pytest.raises(KeyError):
        run_cascade(toy3, scenario({42}))


def test_account_outages(ieee39):
    assert account_outages(ieee39, 39) == 0
    assert account_outages(remove_elements(ieee39, buses=[1, 2, 3, 4, 5]), 39) == 5
    everything = remove_elements(ieee39, buses=[b.id for b in ieee39.buses])
    assert account_outages(everything, 39) == 39


# -- collapse detection ------------------------------------------------------------------


def test_base_case_is_not_collapsed(ieee39):
    st = init_dynamics(ieee39, solve_ac(ieee39))
    assert detect_collapse(st, ieee39) is None


def test_no_generation_is_capacity_collapse(ieee39):
    st = init_dynamics(ieee39, solve_ac(ieee39))
    net = trip_generators(ieee39, [g.id for g in ieee39.generators])
    assert detect_collapse(st, net) == "capacity"


def test_capacity_threshold(ieee39):
    st = init_dynamics(ieee39, solve_ac(ieee39))
    gens = sorted(ieee39.generators, key=lambda g: -g.p_max)
    need = CAPACITY_FRACTION * st.const.initial_generation
    kept, cap = [], 0.0
    for g in gens:
        if cap >= need:
            break
        kept.append(g.id)
        cap += g.p_max
    net = trip_generators(ieee39, [g.id for g in gens if g.id not in kept])
    assert detect_collapse(st, net) is None
    net = trip_generators(net, [kept[-1]])
    if sum(g.p_max for g in net.live_generators) < need:
        assert detect_collapse(st, net) == "capacity"


def overloaded_state(net, scale):
    st = init_dynamics(net, solve_ac(net))
    st.load_scale = st.load_scale * scale
    return step(st, net, 0.01)


def test_infeasible_island_is_voltage_collapse_once_ufls_exhausted(toy3):
    st = overloaded_state(toy3, 200.0)
    assert st.island_failed[1]
    assert detect_collapse(st, toy3) is None  # load shedding still has stages left
    st.ufls_fired[:] = True
    assert detect_collapse(st, toy3) == "voltage"


def test_failed_island_removed_since_solve_is_ignored(toy3):
    st = overloaded_state(toy3, 200.0)
    st.ufls_fired[:] = True
    gone = remove_elements(toy3, buses=[1, 2, 3])
    assert detect_collapse(st, gone) == "capacity"  # not "voltage": that island no longer exists


def test_frequency_condition_needs_one_second(toy3):
    st = init_dynamics(toy3, solve_ac(toy3))
    assert detect_collapse(st, toy3, out_of_band_time=0.99) is None
    assert detect_collapse(st, toy3, out_of_band_time=1.0) == "frequency"


# -- invariants on real runs ---------------------------------------------------------------


@pytest.fixture(scope="module")
def ieee39_runs(ieee39):
    sc = scenario({16, 21}, t_end=4.0)
    hidden = frozenset({3, 40, 77, 190})
    return ieee39, sc, hidden, run_cascade(ieee39, sc, hidden), run_cascade(ieee39, sc, hidden)


def test_events_ordered_and_attack_only_at_tf(ieee39_runs):
    _, sc, _, res, _ = ieee39_runs
    ts = [e.t for e in res.events]
    assert ts == sorted(ts)
    assert all(e.t == pytest.approx(sc.t_f) for e in res.events if e.cause is Cause.ATTACK)
    assert {e.element_id for e in res.events
            if e.cause is Cause.ATTACK and e.element == "bus"} == set(sc.target_set)


def test_delta_n_counts_final_buses(ieee39_runs):
    net, _, _, res, _ = ieee39_runs
    assert res.delta_n == res.n0 - res.final_net.n_in_service
    removed = {e.element_id for e in res.events
               if e.element == "bus" and e.cause is not Cause.UFLS}
    assert len(removed) == res.delta_n


def test_identical_inputs_identical_results(ieee39_runs):
    _, _, _, a, b = ieee39_runs
    assert records(a) == records(b)
    assert (a.delta_n, a.c, a.t_stop) == (b.delta_n, b.c, b.t_stop)
    assert a.series.load_mw == b.series.load_mw
    assert np.array_equal(np.array(a.series.vm), np.array(b.series.vm))


def test_relay_events_match_relay_log(ieee39_runs):
    _, _, hidden, res, _ = ieee39_runs
    log = {(op.relay_id, round(op.t, 9)) for op in res.relay_log}
    for e in res.events:
        if e.cause is Cause.RELAY and not e.detail:
            assert (e.relay_id, round(e.t, 9)) in log
            assert e.hidden == (e.relay_id in hidden)


def test_series_lengths(ieee39_runs):
    _, _, _, res, _ = ieee39_runs
    s = res.series
    assert len(s.t) == len(s.load_mw) == len(s.gen_mw) == len(s.vm) == len(s.delta_deg)
    assert s.t[0] == 0.0 and s.t[-1] == pytest.approx(res.t_stop + 0.01)
