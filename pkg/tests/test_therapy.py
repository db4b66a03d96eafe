"""Therapy prescription truth table, scheme selection and pulse arithmetic."""
import itertools

import pytest
from hypothesis import given, strategies as st

from simicd.device_logic import DetectionParams, DetectionWindow, ZoneId
from simicd.therapy import (NEW_P2, AtpParams, AtpZoneParams, Scheme, TherapyCounters, TherapyDecision,
                            TherapyKind, prescribe, schedule_atp, schedule_shock, select_scheme)

P = DetectionParams()
MAX_T = {ZoneId.VT1: 2, ZoneId.VT: 2, ZoneId.VF1: 1, ZoneId.VF: 0}


def reference_prescription(zone, initial, corr_count, tcount, max_t, corr_max=3):
    """Branch structure of the prescription pseudocode, written out by hand."""
    if zone == "VF1" and tcount < max_t:
        return "QCATP", tcount + 1
    if zone in ("VT", "VT1") and tcount < max_t:
        if initial and corr_count > corr_max:
            return "Inhibit", tcount
        return "ATP", tcount + 1
    return "Shock", tcount


def window_with(corr_count, periods=(400.0,) * 10):
    vtcs = [0.99] * corr_count + [0.5] * (10 - corr_count)
    return DetectionWindow(periods, vtcs, 12345.0)


def test_truth_table_exhaustive():
    rows = 0
    for zone in ZoneId:
        for initial, corr, tcount in itertools.product((True, False), range(11), range(MAX_T[zone] + 1)):
            tc = {z: 0 for z in ZoneId}
            tc[zone] = tcount
            counters = TherapyCounters(tc, dict(MAX_T), initial)
            decision, after = prescribe(zone, window_with(corr), counters, P)
            kind, expect_t = reference_prescription(zone.name, initial, corr, tcount, MAX_T[zone])
            assert decision.kind.value == kind, (zone, initial, corr, tcount)
            assert after.tcount[zone] == expect_t
            assert after.initial == initial
            if kind in ("ATP", "QCATP"):
                assert decision.avg_vperiod_ms == 400.0 and decision.v_time_ms == 12345.0
            else:
                assert after == counters
            rows += 1
    assert rows == 11 * 2 * (3 + 3 + 2 + 1)


def test_vf_always_shocks():
    for corr in range(11):
        d, _ = prescribe(ZoneId.VF, window_with(corr), TherapyCounters(), P)
        assert d.kind == TherapyKind.SHOCK


def test_correlated_initial_episode_inhibits():
    c = TherapyCounters()
    d, after = prescribe(ZoneId.VT, window_with(8), c, P)
    assert d.kind == TherapyKind.INHIBIT and after == c


def test_redetection_never_inhibits():
    c = TherapyCounters(initial=False)
    d, _ = prescribe(ZoneId.VT, window_with(10), c, P)
    assert d.kind == TherapyKind.ATP


def test_exhausted_vt_shocks():
    c = TherapyCounters({ZoneId.VT: 2}, initial=False)
    d, _ = prescribe(ZoneId.VT, window_with(0), c, P)
    assert d.kind == TherapyKind.SHOCK


def test_average_uses_last_four_periods():
    w = DetectionWindow((800,) * 6 + (300, 310, 320, 330), (0,) * 10, 0.0)
    d, _ = prescribe(ZoneId.VT, w, TherapyCounters(), P)
    assert d.avg_vperiod_ms == 315.0


def test_scheme_progression():
    assert select_scheme(ZoneId.VT, 0) == Scheme.BURST
    assert select_scheme(ZoneId.VT, 1) == Scheme.RAMP
    assert select_scheme(ZoneId.VT1, 1) == Scheme.RAMP
    assert select_scheme(ZoneId.VF1, 0) == Scheme.QC
    with pytest.raises(ValueError):
        select_scheme(ZoneId.VT, 2)
    with pytest.raises(ValueError):
        select_scheme(ZoneId.VF, 0)


def decision(avg, t=10000.0):
    return TherapyDecision(TherapyKind.ATP, avg, t)


def test_burst_81_of_400():
    s = schedule_atp(Scheme.BURST, decision(400.0), AtpParams()[ZoneId.VT])
    assert len(s.pulse_times_ms) == 8
    assert s.pulse_times_ms[0] == pytest.approx(10324.0, abs=1e-9)
    assert all(abs(i - 324.0) <= 1e-9 for i in s.intervals)


def test_qc_88_of_350():
    s = schedule_atp(Scheme.QC, TherapyDecision(TherapyKind.QCATP, 350.0, 0.0), AtpParams()[ZoneId.VF1])
    assert all(abs(i - 308.0) <= 1e-9 for i in s.intervals)


def test_new_p2_ramp():
    s = schedule_atp(Scheme.RAMP, decision(400.0), NEW_P2)
    gaps = s.intervals[1:]
    assert len(s.pulse_times_ms) == 12
    assert abs(s.intervals[0] - 352.0) <= 1e-9
    expected = [352.0 - 5.0 * k for k in range(1, 12)]
    assert max(abs(a - b) for a, b in zip(gaps, expected)) <= 1e-9
    assert abs(gaps[-1] - 297.0) <= 1e-9


def test_schedule_rejects_bad_inputs():
    with pytest.raises(ValueError):
        schedule_atp(Scheme.BURST, TherapyDecision(TherapyKind.SHOCK), NEW_P2)
    with pytest.raises(ValueError):
        TherapyDecision(TherapyKind.ATP)


def test_shock_timing():
    s = schedule_shock(5000.0, 2000.0)
    assert (s.onset_ms, s.duration_ms) == (7000.0, 10.0)
    assert schedule_shock(5000.0, 0.0).onset_ms == 5000.0


@given(st.floats(200, 600), st.floats(50, 100), st.integers(1, 15), st.floats(0, 30), st.floats(0, 1e5))
def test_ramp_gaps_shrink_to_floor(avg, pct, n, dec, t):
    p = AtpZoneParams(pct, pct, n, dec)
    s = schedule_atp(Scheme.RAMP, decision(avg, t), p)
    gaps = s.intervals[1:]
    base = pct / 100 * avg
    for k, g in enumerate(gaps, start=1):
        assert g == pytest.approx(max(base - k * dec, p.min_interval_ms), abs=1e-9)
        assert g >= min(base, p.min_interval_ms) - 1e-9


@given(st.floats(200, 600), st.floats(50, 100), st.integers(1, 15))
def test_burst_is_arithmetic(avg, pct, n):
    s = schedule_atp(Scheme.BURST, decision(avg), AtpZoneParams(pct, pct, n))
    assert len(s.pulse_times_ms) == n
    assert all(abs(g - pct / 100 * avg) <= 1e-6 for g in s.intervals)
