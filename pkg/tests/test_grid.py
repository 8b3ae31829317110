import numpy as np
import pytest

from pemsim.grid import (GridError, GridParams, IngestionError, TwoAreaGrid, agc_dispatch,
                         compute_ace, der_weight, frequency_response, ingest_solar_profile)


def _settle(grid, seconds, **kw):
    for _ in range(int(round(seconds / 0.1))):
        grid.step(0.1, **kw)
    return grid.state


def test_droop_only_frequency_matches_closed_form():
    grid = TwoAreaGrid(agc=False)
    st = _settle(grid, 2400.0, solar_mw=30.0)
    p = grid.params
    # every droop unit and both areas' damping share the 30 MW surplus
    stiffness = sum(p.damping) + sum(r.capacity / (r.droop * 1e-3) / p.base_mw
                                     for r in p.resources if r.droop is not None)
    expected = 30.0 / p.base_mw / stiffness
    assert st.freq[0] == pytest.approx(expected, rel=1e-6)
    assert st.freq[1] == pytest.approx(expected, rel=1e-6)
    assert grid.droop_steady_state(30.0) == pytest.approx(expected, rel=1e-12)


def test_agc_restores_frequency_and_schedule():
    grid = TwoAreaGrid(agc=True)
    peak = 0.0
    for _ in range(24000):
        st = grid.step(0.1, solar_mw=30.0)
        peak = max(peak, abs(st.freq[0]))
    assert abs(st.freq[0]) <= 0.01 * peak
    assert abs(st.tie * grid.params.base_mw) <= 0.01 * 30.0
    out = st.output_mw(grid.params)
    names = [r.name for r in grid.params.resources]
    assert out[names.index("external")] == pytest.approx(218.0, abs=0.3)
    # the internal area's units absorb the surplus
    assert st.mech[[i for i, r in enumerate(grid.params.resources) if r.area == 0]].sum() == pytest.approx(-30.0, abs=0.3)


def test_power_balance_residual_is_zero():
    grid = TwoAreaGrid()
    _settle(grid, 5.0, solar_mw=30.0)
    assert grid.power_balance_residual(solar_mw=30.0) < 1e-12


def test_natural_bias_ace():
    p = GridParams()
    st = TwoAreaGrid(p).state
    st.freq[:] = [0.001, 0.0]
    st.tie = 0.002
    assert compute_ace(st, p, 0) == pytest.approx(frequency_response(p, 0) * 0.001 + 0.002)
    assert compute_ace(st, p, 1) == pytest.approx(-0.002)
    literal = GridParams(bias_scale=1.0)
    assert compute_ace(st, literal, 0) == pytest.approx(0.003)


def test_der_weight_ramps_near_limits():
    assert der_weight(None, 0.1, 0.9, True) == 1.0
    assert der_weight(0.5, 0.1, 0.9, True) == 1.0
    assert der_weight(0.9, 0.1, 0.9, True) == 0.0
    assert der_weight(0.82, 0.1, 0.9, True) == pytest.approx(0.5)
    assert der_weight(0.14, 0.1, 0.9, False) == pytest.approx(0.25)


def test_dispatch_respects_capacity():
    p = GridParams()
    new, _ = agc_dispatch(-1000.0, p, np.zeros(len(p.resources)), 0.1)
    for r, value in zip(p.resources, new):
        if r.area == 0 and r.kind == "generator":
            assert value == pytest.approx(r.capacity - r.scheduled)


def test_der_setpoint_stays_near_delivered_output():
    grid = TwoAreaGrid(GridParams(der_windup_mw=0.5))
    for _ in range(3000):
        st = grid.step(0.1, solar_mw=30.0, der_actual=0.0)
    assert abs(st.setpoint[grid.der_index]) <= 0.5 + 1e-12


def test_step_size_contract():
    with pytest.raises(GridError):
        TwoAreaGrid().step(0.2)


def test_solar_ingestion(tmp_path):
    f = tmp_path / "solar.csv"
    f.write_text("time,mw\n0,10\n1,12\n2,8\n")
    t, mw = ingest_solar_profile(f, dt=0.5)
    assert np.allclose(t, [0, 0.5, 1, 1.5, 2])
    assert np.allclose(mw, [0, 1, 2, 0, -2])
    iso = tmp_path / "iso.csv"
    iso.write_text("2024-06-01T12:00:00,5\n2024-06-01T12:00:01,6\n")
    t, mw = ingest_solar_profile(iso, dt=0.1, baseline=None)
    assert t[-1] == pytest.approx(1.0) and mw[-1] == pytest.approx(6.0)


@pytest.mark.parametrize("text, row", [
    ("0,1\n0,2\n", 2),
    ("0,1\n1,oops\n", 2),
    ("0,1\nnever,2\n", 2),
    ("0,1\n1,nan\n", 2),
    ("0,1\n", 0),
    ("0\n", 1),
])
def test_solar_ingestion_errors(tmp_path, text, row):
    f = tmp_path / "bad.csv"
    f.write_text(text)
    with pytest.raises(IngestionError) as err:
        ingest_solar_profile(f)
    assert err.value.row == row
