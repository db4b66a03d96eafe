"""Beat detection, periods, NSR template and VTC scoring."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from simicd.sensing import (BeatDetector, BeatEvent, EgmFormatError, EgmTrace, SensingParams, beat_window,
                            build_nsr_template, compute_periods, detect_beats, read_egm_csv, vtc_score,
                            write_egm_csv)


def spikes(times, n, amp=5.0, width=3, ff=None):
    nf = np.zeros(n)
    for t in times:
        nf[t:t + width] = amp * np.array([1.0, 0.6, -0.4])[:width]
    return EgmTrace(0.0, nf, nf.copy() if ff is None else ff)


def biphasic(n_ms=201):
    t = np.arange(n_ms) - 80.0
    return 3.0 * np.exp(-((t - 5) / 10) ** 2) - 2.0 * np.exp(-((t - 30) / 15) ** 2)


def test_flat_trace_has_no_beats():
    assert detect_beats(EgmTrace(0.0, np.zeros(5000), np.zeros(5000))) == []


def test_empty_trace():
    assert detect_beats(EgmTrace(0.0, np.zeros(0), np.zeros(0))) == []


def test_paced_800ms_for_10s():
    beats = detect_beats(spikes(range(50, 10000, 800), 10000))
    assert 12 <= len(beats) <= 13
    assert set(compute_periods(beats)) == {800.0}


def test_refractory_suppresses_second_spike():
    beats = detect_beats(spikes([1000, 1100], 3000))
    assert [b.t_ms for b in beats] == [1000.0]


def test_adaptive_threshold_ignores_small_deflections():
    tr = spikes([500, 1300, 2100], 3000)
    nf = tr.nf_mV.copy()
    nf[1700] = 1.5  # below half the running peak
    beats = detect_beats(EgmTrace(0.0, nf, nf))
    assert [b.t_ms for b in beats] == [500.0, 1300.0, 2100.0]


def test_non_finite_rejected():
    with pytest.raises(ValueError):
        BeatDetector().feed([0.0, np.nan], 0.0)


def test_streaming_matches_batch():
    tr = spikes(range(30, 9000, 437), 9000)
    whole = detect_beats(tr)
    det = BeatDetector()
    parts = []
    for k in range(0, 9000, 500):
        parts += det.feed(tr.nf_mV[k:k + 500], float(k))
    assert parts == whole


def test_periods():
    assert compute_periods([0, 800, 1600]) == [800, 800]
    assert compute_periods([BeatEvent(0), BeatEvent(400), BeatEvent(700)]) == [400, 300]
    assert compute_periods([BeatEvent(5)]) == []


def test_rvot_burst_periods_in_range():
    times = [200 + int(round(k * 60000 / 135)) for k in range(10)]
    beats = detect_beats(spikes(times, 6000))
    assert all(400 <= p <= 500 for p in compute_periods(beats))


def test_template_of_identical_beats():
    n = 8000
    ff = np.zeros(n)
    times = list(range(300, n - 300, 800))
    for t in times:
        ff[t - 80:t + 121] += biphasic()
    tr = spikes(times, n, ff=ff)
    tpl = build_nsr_template(tr)
    assert len(tpl) == 201
    assert np.allclose(tpl.window_mV, beat_window(tr, times[2]))
    assert vtc_score(tpl.window_mV, tpl) == pytest.approx(1.0, abs=1e-9)


def test_template_averages_noise():
    rng = np.random.default_rng(0)
    n = 12000
    eps = 0.05
    ff = np.zeros(n)
    times = list(range(300, n - 300, 800))
    for t in times:
        ff[t - 80:t + 121] += biphasic() + rng.uniform(-eps, eps, 201)
    tpl = build_nsr_template(spikes(times, n, ff=ff))
    assert np.max(np.abs(tpl.window_mV - biphasic())) <= eps


def test_template_needs_five_beats():
    with pytest.raises(ValueError, match="insufficient NSR data"):
        build_nsr_template(spikes([300, 1100, 1900], 3000))


def test_vtc_examples():
    w = biphasic()
    assert vtc_score(w, w) == pytest.approx(1.0, abs=1e-12)
    assert vtc_score(-w, w) == pytest.approx(-1.0, abs=1e-12)
    assert vtc_score(np.roll(w, 10), w) < 0.94
    assert vtc_score(np.ones_like(w), w) == 0.0
    with pytest.raises(ValueError):
        vtc_score(w[:-1], w)


def brute_corr(a, b):
    a = a - sum(a) / len(a)
    b = b - sum(b) / len(b)
    num = sum(x * y for x, y in zip(a, b))
    den = (sum(x * x for x in a) * sum(y * y for y in b)) ** 0.5
    return num / den


def test_vtc_matches_brute_force():
    w = biphasic()
    for shift in (1, 3, 10, 25):
        assert vtc_score(np.roll(w, shift), w) == pytest.approx(brute_corr(list(np.roll(w, shift)), list(w)), abs=1e-12)


arrays = st.lists(st.floats(-10, 10, allow_nan=False), min_size=201, max_size=201).map(np.array)


@settings(max_examples=100, deadline=None)
@given(arrays, st.floats(0.01, 100))
def test_vtc_scale_invariant_and_bounded(w, a):
    t = biphasic()
    s = vtc_score(w, t)
    assert -1.0 <= s <= 1.0
    if np.ptp(w) > 1e-6:
        assert vtc_score(a * w, t) == pytest.approx(s, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-8, 8, allow_nan=False), min_size=50, max_size=3000), st.floats(10, 300))
def test_beats_respect_refractory(samples, refractory):
    tr = EgmTrace(0.0, np.array(samples), np.zeros(len(samples)))
    beats = detect_beats(tr, SensingParams(refractory_ms=refractory))
    assert all(b.t_ms - a.t_ms >= refractory for a, b in zip(beats, beats[1:]))


@given(st.lists(st.floats(0, 1e6), min_size=2, max_size=30).map(sorted), st.floats(-1e4, 1e4))
def test_periods_shift_invariant(times, dt):
    assert compute_periods([t + dt for t in times]) == pytest.approx(compute_periods(times), abs=1e-6)


def test_csv_round_trip(tmp_path):
    tr = spikes([100, 900], 1500)
    path = write_egm_csv(tr, tmp_path / "egm.csv")
    back = read_egm_csv(path)
    assert np.array_equal(back.nf_mV, tr.nf_mV) and back.t0_ms == 0.0 and back.dt_ms == 1.0


def test_csv_errors_carry_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("t_ms,nf_mV,ff_mV\n0,1,2\n1,x,2\n")
    with pytest.raises(EgmFormatError) as err:
        read_egm_csv(p)
    assert err.value.line == 3
    p.write_text("t_ms,nf_mV,ff_mV\n0,1,2\n1,1,2\n3,1,2\n")
    with pytest.raises(EgmFormatError) as err:
        read_egm_csv(p)
    assert err.value.line == 4
    p.write_text("time,a,b\n")
    with pytest.raises(EgmFormatError) as err:
        read_egm_csv(p)
    assert err.value.line == 1
