import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pemsim.metrics import (MisalignedSeriesError, compute_metrics, continuous_mean, continuous_rms,
                            read_csv, rms, step_series, write_csv)


def _trace(t, ref, dem):
    return {"t": np.asarray(t, float), "reference_kw": np.asarray(ref, float),
            "demand_kw": np.asarray(dem, float)}


def test_identical_series_have_zero_rms():
    t = np.arange(1, 101.0)
    m = compute_metrics(_trace(t, np.full(100, 5.0), np.full(100, 5.0)), warmup=0.0, baseline_kw=50.0)
    assert m.rms_kw == 0.0 and m.rms_pct == 0.0


@given(st.floats(-1e3, 1e3))
def test_constant_offset_rms_is_its_magnitude(offset):
    ref = np.linspace(0, 10, 50)
    assert rms(ref, ref + offset) == pytest.approx(abs(offset), abs=1e-9)


def test_warmup_is_excluded():
    t = np.arange(1, 11.0)
    dem = np.where(t <= 5, 100.0, 0.0)
    m = compute_metrics(_trace(t, np.zeros(10), dem), warmup=5.0)
    assert m.rms_kw == 0.0 and m.rms_full_kw > 0


def test_misaligned_series_raise():
    with pytest.raises(MisalignedSeriesError):
        rms([1, 2], [1])
    with pytest.raises(MisalignedSeriesError):
        compute_metrics({"t": np.arange(3.0), "reference_kw": np.zeros(3), "demand_kw": np.zeros(2)})


def test_empty_series_give_nan():
    assert math.isnan(rms([], []))


def test_step_windows_drop_transients():
    t = np.arange(1, 21.0)
    ref = np.where(t < 10, 1.0, 2.0)
    dem = ref.copy()
    dem[9] = 0.0  # inside the second step's transient
    dem[15] = 1.0  # inside the steady part
    m = compute_metrics(_trace(t, ref, dem), warmup=0.0, steps=[(0, 1.0), (10, 2.0)],
                        step_transient=2.0, duration=20.0)
    (a0, b0, r0, e0), (a1, b1, r1, e1) = m.step_rms_kw
    assert (a0, b0, r0, e0) == (0, 10, 1.0, 0.0)
    assert r1 == 2.0 and e1 == pytest.approx(math.sqrt(1 / 8))


def test_continuous_rms_of_a_short_pulse():
    truth = step_series(0.0, 0.0, [(10.0, 4.5)])
    est = step_series(0.0, 0.0, [(10.008, 4.5)])
    assert continuous_rms(est, truth, 0.0, 100.0) == pytest.approx(4.5 * math.sqrt(0.008 / 100))
    assert continuous_mean(est, truth, 0.0, 100.0) == pytest.approx(-4.5 * 0.008 / 100)


def test_csv_round_trip(tmp_path):
    path = write_csv(tmp_path / "x.csv", ["t", "v"], [(0, 1.5), (1, 2.25)])
    data = read_csv(path)
    assert np.array_equal(data["v"], [1.5, 2.25])
