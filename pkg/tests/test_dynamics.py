import math

import numpy as np
import pytest

from gridcascade.acpf import solve_ac
from gridcascade.dynamics import (
    FaultSpec, apply_fault, clear_fault, derivatives, init_dynamics, simulate, step,
)
from gridcascade.netmodel import parse_case
from oracles import SMIB, SmibOracle, smib_case


def smib(**kw):
    net = parse_case(smib_case(**kw))
    return net, init_dynamics(net, solve_ac(net))


def smib_oracle(state):
    c = state.const
    return SmibOracle(c.e_mag[0], c.e_mag[1], SMIB["xd"], SMIB["x_line"] + SMIB["xd_inf"],
                      SMIB["h"], SMIB["h_inf"], SMIB["d"])


def kicked(state, domega=0.004):
    s = state.copy()
    s.domega = s.domega + np.array([domega, 0.0])
    return s


# -- initialisation -------------------------------------------------------------


def test_smib_initial_angle():
    net, st = smib()
    c = st.const
    x_total = SMIB["xd"] + SMIB["x_line"] + SMIB["xd_inf"]
    expected = math.asin(SMIB["p"] * x_total / (c.e_mag[0] * c.e_mag[1]))
    assert st.delta[0] - st.delta[1] == pytest.approx(expected, abs=1e-9)


def test_zero_output_machine_sits_on_bus_angle():
    net, st = smib(p=0.0)
    pf = solve_ac(net)
    assert st.delta[0] == pytest.approx(float(pf.va[pf.bus_ids.index(1)]), abs=1e-9)
    assert st.pm[0] == pytest.approx(0.0, abs=1e-9)


def test_ieee39_starts_at_equilibrium(ieee39):
    st = init_dynamics(ieee39, solve_ac(ieee39))
    assert np.max(np.abs(derivatives(st, ieee39))) <= 1e-8


def test_nonconverged_power_flow_rejected(ieee39):
    pf = solve_ac(ieee39, max_iter=0)
    with pytest.raises(ValueError):
        init_dynamics(ieee39, pf)


# -- integration ---------------------------------------------------------------


def equilibrium_drift(net, t_end=10.0, dt=0.01):
    st = init_dynamics(net, solve_ac(net))
    x0 = np.concatenate([st.delta, st.domega, st.pm, st.efd])
    s = st
    worst = 0.0
    for _ in range(int(round(t_end / dt))):
        s = step(s, net, dt)
        x = np.concatenate([s.delta, s.domega, s.pm, s.efd])
        worst = max(worst, float(np.max(np.abs(x - x0))))
    return worst


def test_undisturbed_equilibrium_holds_for_ten_seconds(ieee39):
    assert equilibrium_drift(ieee39) <= 1e-6


def test_step_rejects_nonpositive_dt():
    net, st = smib()
    with pytest.raises(ValueError):
        step(st, net, 0.0)


def fault_run(duration, t_end=3.0, dt=0.01):
    """SMIB with a bolted fault at the machine bus from t=0.1; returns (ours, oracle) in degrees."""
    net, st = smib()
    traj = simulate(net, st, t_end, dt, [FaultSpec({1}, 0.1, duration)])
    ours = np.degrees([s.delta[0] - s.delta[1] for s in traj])
    o = smib_oracle(st)
    y0 = [st.delta[0], st.delta[1], 0.0, 0.0]
    segs = [(0.0, 0.1, False), (0.1, 0.1 + duration, True), (0.1 + duration, t_end, False)]
    _, y = o.integrate(y0, st.pm, segs, dt)
    return ours, np.degrees(y[:, 0] - y[:, 1])


def test_short_fault_is_stable_and_matches_reference():
    ours, ref = fault_run(0.05)
    assert ours.max() < 90 and ours.max() > ours[0] + 5  # it swings, and comes back
    assert abs(ours[-1] - ours[0]) < 30
    assert np.max(np.abs(ours - ref)) < 0.01


def test_long_fault_loses_synchronism_and_matches_reference():
    ours, ref = fault_run(0.5)
    assert ours[-1] > 360
    past = np.argmax(ours > 180)
    assert past > 0 and np.all(np.diff(ours[past:]) > 0)  # no return once past 180 deg
    upto = ref < 720
    assert np.max(np.abs(ours[upto] - ref[upto])) < 0.05


def energy_drift_per_second(t_end=10.0, dt=0.01):
    net, st = smib()
    o = smib_oracle(st)
    ref = (st.delta[0], st.delta[1])
    traj = simulate(net, kicked(st), t_end, dt)
    W = np.array([o.energy(s.delta[0], s.delta[1], s.domega[0], s.domega[1], st.pm, ref)
                  for s in traj])
    return float(np.max(np.abs(W - W[0])) / abs(W[0]) / t_end)


def test_undamped_energy_conserved():
    assert energy_drift_per_second() <= 1e-3


def rk4_orders(steps=(0.04, 0.02, 0.01, 0.005), t_end=1.0):
    """Observed order from successive halvings, against a tight scipy reference."""
    net, st = smib()
    s0 = kicked(st)
    o = smib_oracle(st)
    y0 = [s0.delta[0], s0.delta[1], s0.domega[0], s0.domega[1]]
    _, y = o.integrate(y0, st.pm, [(0.0, t_end, False)], min(steps))
    exact = y[-1, 0]
    errs = [abs(simulate(net, s0, t_end, h)[-1].delta[0] - exact) for h in steps]
    return [math.log2(errs[k] / errs[k + 1]) for k in range(len(errs) - 1)]


def test_rk4_convergence_order():
    assert min(rk4_orders()) >= 3.5


# -- faults --------------------------------------------------------------------


def test_fault_pulls_bus_voltage_down(ieee39):
    st = init_dynamics(ieee39, solve_ac(ieee39))
    s = step(st, apply_fault(ieee39, FaultSpec({16}, 0.0)), 0.01)
    assert abs(s.bus_voltage(ieee39, 16)) < 0.01


def test_apply_then_clear_is_identity(ieee39):
    spec = FaultSpec({4, 16}, 1.0)
    assert clear_fault(apply_fault(ieee39, spec), spec) == ieee39
    with pytest.raises(KeyError):
        apply_fault(ieee39, FaultSpec({999}, 0.0))


def test_fault_current_exceeds_ten_times_prefault():
    # a 1 pu load behind x=0.1 caps any fault current near 10 pu, so the load is kept light
    net = parse_case("""BASE_MVA 100
BUS
1 slack 345
2 pq 345
BRANCH
1 1 2 0.0 0.1 0.0 500
GEN
1 1 0 -999 999 1.0 300 5.0 0.0 0.05
LOAD
1 2 20 0
""")
    st = init_dynamics(net, solve_ac(net))
    faulted = apply_fault(net, FaultSpec({2}, 0.0))

    def line_current(s):
        return abs((s.bus_voltage(net, 1) - s.bus_voltage(net, 2)) / 0.1j)

    before = line_current(step(st, net, 0.01))
    s = step(st, faulted, 0.01)
    during = line_current(s)
    # short-circuit calculation: E' behind x'd + x_line into the fault shunt, load in parallel
    e = st.const.e_mag[0] * np.exp(1j * s.delta[0])
    y_load = st.const.y_load0[0]
    z_shunt = 1 / (1e5 + y_load)
    i_sc = abs(e / (0.05j + 0.1j + z_shunt))
    assert during == pytest.approx(i_sc, rel=1e-9)
    assert during > 10 * before
