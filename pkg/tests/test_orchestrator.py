import json

import numpy as np
import pytest
from dataclasses import replace
from hypothesis import given, settings, strategies as st

from simicd.device_logic import DetectionParams
from simicd.orchestrator import (EpisodeReport, Outcome, classify_termination, replay_open_loop,
                                 rhythm_label, run_closed_loop)
from simicd.scenarios import IcdConfig
from simicd.sensing import EgmTrace

from conftest import small_scenario, uninterrupted

P = DetectionParams()


def spike_train(times, n, amp=5.0):
    nf = np.zeros(n)
    for t in times:
        nf[t:t + 3] = amp
    return EgmTrace(0.0, nf, nf.copy())


def nsr_then_vt(n_nsr=12, n_vt=120, cl=300):
    times = [100 + 800 * k for k in range(n_nsr)]
    times += [times[-1] + cl * k for k in range(1, n_vt)]
    return times


# ---------------------------------------------------------------- termination

def test_steady_sinus_terminates():
    assert classify_termination([800.0] * 10, P) == "terminated"


def test_fast_rhythm_is_ongoing():
    assert classify_termination([330.0] * 30, P) == "ongoing"


def test_alternation_is_ongoing():
    assert classify_termination([800.0, 300.0] * 20, P) == "ongoing"


def test_threshold_period_counts_as_slow():
    assert classify_termination([429.0] * 10, P) == "terminated"
    assert classify_termination([428.9] * 10, P) == "ongoing"


def test_nine_slow_beats_are_not_enough():
    assert classify_termination([300.0] + [800.0] * 9, P) == "ongoing"


@given(st.lists(st.floats(100, 1200), max_size=40), st.integers(1, 12))
def test_termination_matches_run_length(periods, k):
    longest = run = 0
    for p in periods:
        run = run + 1 if p >= P.th[0] else 0
        longest = max(longest, run)
    assert (classify_termination(periods, P, k) == "terminated") == (longest >= k)


def test_rhythm_labels():
    assert rhythm_label([800.0] * 5, P) == "sinus"
    assert rhythm_label([400.0] * 5, P) == "VT1"
    assert rhythm_label([320.0] * 5, P) == "VT"
    assert rhythm_label([200.0] * 5, P) == "VF"
    assert rhythm_label([], P) == "unknown"


# ---------------------------------------------------------------- open-loop replay

def test_replay_of_sinus_needs_no_therapy():
    times = [100 + 800 * k for k in range(25)]
    rep = replay_open_loop(spike_train(times, times[-1] + 500), IcdConfig())
    assert rep.outcome == Outcome.NO_THERAPY
    assert rep.zone_entries == 0
    assert abs(rep.rate_bpm - 75.0) < 1e-9
    rep.check_consistency()


def test_replay_of_300ms_vt_escalates():
    times = nsr_then_vt()
    rep = replay_open_loop(spike_train(times, times[-1] + 500), IcdConfig())
    ev = [e for e in rep.events if e["type"] != "sense"]
    last_nsr = times[11]
    # 8th fast period enters VT1 and VT; 9 more 300 ms periods push the clock past 2500 ms
    entry = [e for e in ev if e["type"] == "zone_entry"]
    assert entry[0]["t_ms"] == last_nsr + 8 * 300
    sustained = [e for e in ev if e["type"] == "sustained"]
    assert sustained[0]["t_ms"] == last_nsr + 17 * 300
    assert sustained[0]["zone"] == "VT"  # more severe of the two zones sustaining together
    therapy = [e for e in ev if e["type"] == "therapy"]
    assert [(t["kind"], t.get("scheme")) for t in therapy] == [("ATP", "burst"), ("ATP", "ramp"), ("Shock", None)]
    first = therapy[0]
    assert first["pulses"][0] == pytest.approx(first["t_ms"] + 0.81 * 300)
    assert np.allclose(np.diff(first["pulses"]), 0.81 * 300)
    assert rep.outcome == Outcome.EXHAUSTED
    rep.check_consistency()


def test_redetection_uses_shorter_duration():
    times = nsr_then_vt()
    rep = replay_open_loop(spike_train(times, times[-1] + 500), IcdConfig())
    therapy = [e for e in rep.events if e["type"] == "therapy"]
    sustained = [e for e in rep.events if e["type"] == "sustained"]
    assert not sustained[0]["redetect"] and sustained[1]["redetect"]
    entries = [e["t_ms"] for e in rep.events if e["type"] == "zone_entry" and e["zone"] == "VT"]
    # after entry the re-detection clock needs four 300 ms periods to pass 1000 ms
    assert sustained[1]["t_ms"] == entries[1] + 4 * 300
    assert sustained[1]["t_ms"] > therapy[0]["pulses"][-1]


def test_correlated_initial_episode_inhibits():
    # a template identical to every beat makes all scores 1
    times = nsr_then_vt()
    trace = spike_train(times, times[-1] + 500)
    w = np.zeros(201)
    w[80:83] = 5.0
    rep = replay_open_loop(trace, IcdConfig(), template=w)
    kinds = [e["kind"] for e in rep.events if e["type"] == "therapy"]
    assert kinds and set(kinds) == {"Inhibit"}
    assert rep.outcome == Outcome.INHIBITED
    rep.check_consistency()


def test_therapy_event_fields():
    times = nsr_then_vt()
    rep = replay_open_loop(spike_train(times, times[-1] + 500), IcdConfig())
    ev = next(e for e in rep.events if e["type"] == "therapy")
    assert {"t_ms", "type", "zone", "kind", "scheme", "pulses"} <= set(ev)
    for line in rep.events_jsonl().splitlines():
        assert {"t_ms", "type"} <= set(json.loads(line))


def test_consistency_check_catches_forged_outcome():
    rep = replay_open_loop(spike_train([100 + 800 * k for k in range(12)], 9500), IcdConfig())
    forged = replace(rep, outcome=Outcome.TERMINATED)
    with pytest.raises(AssertionError):
        forged.check_consistency()
    forged = replace(rep, n_therapies=1)
    with pytest.raises(AssertionError):
        forged.check_consistency()


def test_report_json_is_sorted_and_stable():
    times = nsr_then_vt()
    trace = spike_train(times, times[-1] + 500)
    a = replay_open_loop(trace, IcdConfig()).to_json()
    b = replay_open_loop(trace, IcdConfig()).to_json()
    assert a == b
    doc = json.loads(a)
    assert list(doc) == sorted(doc)


# ---------------------------------------------------------------- closed loop

@pytest.fixture(scope="module")
def therapy_run():
    for seed in range(20):
        sc = small_scenario(seed)
        res = run_closed_loop(sc)
        if res.report.n_therapies:
            return sc, res
    pytest.fail("no randomised scenario delivered a therapy")


def test_closed_loop_rollback_matches_uninterrupted_run(therapy_run):
    sc, res = therapy_run
    assert any(e["type"] == "rollback" for e in res.report.events)
    state, egm = uninterrupted(sc, res)
    assert state.identical(res.final_state)
    assert np.array_equal(egm.nf_mV, res.egm.nf_mV)
    assert np.array_equal(egm.ff_mV, res.egm.ff_mV)


def test_rollback_lands_at_or_before_therapy(therapy_run):
    _, res = therapy_run
    for ev in res.report.events:
        if ev["type"] == "rollback":
            assert ev["restored_to_ms"] <= ev["therapy_onset_ms"]


def test_closed_loop_report_is_consistent(therapy_run):
    sc, res = therapy_run
    rep = res.report
    rep.check_consistency()
    assert rep.outcome in (Outcome.NO_THERAPY, Outcome.INHIBITED, Outcome.TERMINATED, Outcome.EXHAUSTED)
    senses = [e["t_ms"] for e in rep.events if e["type"] == "sense"]
    assert len(senses) == len(set(senses)), "a beat was processed twice"
    assert res.egm.t0_ms == 0.0 and res.egm.t_end_ms == res.final_state.t_ms


def test_atp_pulses_delivered_at_tip(therapy_run):
    _, res = therapy_run
    atp = [s for s in res.stimuli.items if getattr(s, "label", "") == "atp"]
    pulses = [p for t in res.report.therapies if t["kind"] == "ATP" for p in t["pulses"]]
    assert sorted(s.onset_ms for s in atp) == sorted(pulses)
    assert all(s.site == "tip" for s in atp)


def test_run_is_deterministic():
    sc = small_scenario(1)
    a, b = run_closed_loop(sc), run_closed_loop(sc)
    assert a.report.to_json() == b.report.to_json()
    assert a.report.events_jsonl() == b.report.events_jsonl()


def test_unresolved_episode_hits_the_extension_cap():
    sc = small_scenario(0)
    orch = replace(sc.orchestrator, slow_beats=1000, max_extension_ms=500.0)
    res = run_closed_loop(replace(sc, orchestrator=orch))
    if res.report.n_therapies:
        assert res.report.outcome == Outcome.ERROR
        assert res.final_state.t_ms <= sc.duration_ms + 500.0
    else:
        assert res.report.outcome == Outcome.NO_THERAPY
