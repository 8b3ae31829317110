import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pemsim.devices import (ContractViolation, DeviceClass, DeviceParams, DeviceState, Mode,
                            device_deliver, device_tick, request_probability, request_rate,
                            split_request, step_soc)
from pemsim.protocol import Kind, PacketMessage


def test_heating_matches_energy_balance(ewh_params):
    # 4.5 kW for 60 s into 275 L of water, losses and draws switched off
    p = DeviceParams.ewh(4.5, 275.0, draw=None, loss_time_constant=1e30)
    st0 = DeviceState(soc=50.0, switch=1)
    st1 = step_soc(st0, p, 0.0, 60.0)
    expected = 4.5 * 60.0 / (4.186 * 0.990 * 275.0)
    assert st1.soc - 50.0 == pytest.approx(expected, rel=1e-12)


def test_standby_loss_decays_toward_ambient():
    p = DeviceParams.ewh(draw=None)
    st1 = step_soc(DeviceState(soc=52.0), p, 0.0, 1.0)
    assert st1.soc < 52.0
    assert (52.0 - st1.soc) == pytest.approx((52.0 - 21.0) / (150 * 3600.0))


def test_draw_removes_heat():
    p = DeviceParams.ewh(draw=None, loss_time_constant=1e30)
    st1 = step_soc(DeviceState(soc=52.0), p, 1000.0, 1.0)
    assert 52.0 - st1.soc == pytest.approx(1000.0 / p.thermal_mass)


def test_ess_charge_and_discharge_rates():
    p = DeviceParams.ess(5.0, 10.0)
    up = step_soc(DeviceState(soc=75.0, switch=1), p, 0.0, 360.0)
    down = step_soc(DeviceState(soc=75.0, switch=-1), p, 0.0, 360.0)
    # 0.5 kWh into 10 kWh is 5 % of capacity
    assert up.soc == pytest.approx(80.0)
    assert down.soc == pytest.approx(70.0)


def test_step_rejects_bad_inputs(ewh_params):
    with pytest.raises(ContractViolation):
        step_soc(DeviceState(soc=50.0), ewh_params, 0.0, 0.0)
    with pytest.raises(ContractViolation):
        step_soc(DeviceState(soc=math.nan), ewh_params, 0.0, 1.0)


def test_setpoint_probability(ewh_params):
    # at the setpoint the rate equals m_R exactly
    p = request_probability(ewh_params.setpoint, ewh_params, 1.0)
    assert p == pytest.approx(1.0 - math.exp(-1.0 / 200.0), rel=1e-12)


def test_probability_at_edges(ewh_params):
    assert request_probability(ewh_params.upper, ewh_params, 1.0) == 0.0
    assert request_probability(ewh_params.upper + 1, ewh_params, 1.0) == 0.0
    assert request_probability(ewh_params.lower, ewh_params, 1.0) == 1.0
    assert request_probability(ewh_params.lower - 1, ewh_params, 1.0) == 1.0


def test_discharge_law_mirrors_charge():
    p = DeviceParams.ess()
    xs = np.linspace(56, 94, 9)
    mirrored = p.lower + p.upper - xs
    up = request_rate(xs, p, 1)
    down = request_rate(mirrored, p, -1)
    assert np.allclose(up, down)
    assert request_probability(p.upper, p, 1.0, -1) == 1.0
    assert request_probability(p.lower, p, 1.0, -1) == 0.0


params_strategy = st.tuples(
    st.floats(0.0, 80.0),           # lower
    st.floats(0.5, 30.0),           # gap to setpoint
    st.floats(0.5, 30.0),           # gap to upper
    st.floats(1e-4, 0.1),           # m_R
    st.floats(0.1, 60.0),           # dt
)


@settings(max_examples=1000, deadline=None)
@given(params_strategy, st.integers(-1, 1).filter(bool))
def test_request_probability_boundaries_and_monotonicity(values, direction):
    lower, gap_sp, gap_up, m_r, dt = values
    setpoint = lower + gap_sp
    upper = setpoint + gap_up
    p = DeviceParams(DeviceClass.ESS, 5.0, setpoint, lower, upper, discharge_power=5.0,
                     capacity_kwh=13.5, mean_time_to_request=m_r)
    xs = np.linspace(lower, upper, 41)
    probs = np.asarray(request_probability(xs, p, dt, direction))
    assert np.all((probs >= 0) & (probs <= 1))
    if direction > 0:
        assert probs[0] == 1.0 and probs[-1] == 0.0
        assert np.all(np.diff(probs) <= 1e-15)
    else:
        assert probs[0] == 0.0 and probs[-1] == 1.0
        assert np.all(np.diff(probs) >= -1e-15)


@given(st.floats(0, 1, exclude_max=True), st.floats(0, 1), st.floats(0, 1))
def test_split_request_is_exclusive(u, g_c, g_d):
    d = int(split_request(u, g_c, g_d))
    assert d in (-1, 0, 1)
    if g_c == 0 and g_d == 0:
        assert d == 0


def _standby(soc, seed=0):
    return DeviceState(soc=soc, rng=np.random.default_rng(seed))


def test_request_then_accept_runs_packet(ewh_params):
    p = DeviceParams.ewh(draw=None)
    st0 = _standby(48.95, 1)  # just above the band: very likely to request
    for _ in range(200):
        st0, out = device_tick(st0, p, [], 1.0)
        reqs = [m for m in out if m.kind is Kind.REQUEST]
        if reqs:
            break
    assert reqs, "device never requested"
    req = reqs[0]
    assert req.direction == 1 and req.rated_power == 4.5 and req.packet_length == 240.0
    st1, out = device_deliver(st0, p, PacketMessage.response(True, req.correlation_nonce), st0.local_clock)
    assert st1.mode is Mode.CHARGE and st1.switch == 1
    for _ in range(239):
        st1, _ = device_tick(st1, p, [], 1.0)
    assert st1.mode is Mode.CHARGE
    st1, _ = device_tick(st1, p, [], 1.0)
    assert st1.mode is not Mode.CHARGE


def test_below_band_forces_one_packet():
    p = DeviceParams.ewh(draw=None)
    st0, out = device_tick(_standby(48.5), p, [], 1.0)
    notices = [m for m in out if m.kind is Kind.OPT_OUT_NOTICE]
    assert st0.mode is Mode.OPT_OUT_LOW and st0.switch == 1
    assert len(notices) == 1 and notices[0].packet_length == p.packet_charge


def test_above_band_blocks_charge_requests():
    p = DeviceParams.ewh(draw=None, loss_time_constant=1e30)
    st0 = _standby(55.5)
    for _ in range(500):
        st0, out = device_tick(st0, p, [], 1.0)
        assert not any(m.kind is Kind.REQUEST for m in out)
    assert st0.mode is Mode.OPT_OUT_HIGH


def test_stray_response_is_counted():
    p = DeviceParams.ewh(draw=None)
    st1, out = device_deliver(_standby(52.0), p, PacketMessage.response(True, "unknown"), 0.0)
    assert st1.stray_responses == 1 and out == []


def test_params_contract():
    with pytest.raises(ContractViolation):
        DeviceParams.ewh(setpoint=60.0)
    with pytest.raises(ContractViolation):
        DeviceParams.ewh(power=0.0)
    with pytest.raises(ContractViolation):
        DeviceParams(DeviceClass.EWH, 4.5, 52, 48.9, 55.1, discharge_power=1.0, tank_liters=200)
