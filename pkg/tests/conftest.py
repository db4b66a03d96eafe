import numpy as np
import pytest

from simicd.egm import ProbeSamples, synth_egm
from simicd.device_logic import DetectionParams, ZoneId
from simicd.orchestrator import prepare, run_closed_loop
from simicd.scenarios import FocalEpisode, IcdConfig, OrchestratorParams, PatientPreset, Scenario

SMALL = PatientPreset(90, "small test sheet", width_mm=25.0, height_mm=25.0, ectopic={"focus": (12.0, 18.0, 1.5)},
                      tip_mm=(5.0, 5.0, 1.0), ring_mm=(7.0, 7.0, 1.0), episodes=("nsr", "focal"))


def small_scenario(seed):
    """Randomised fast-focus episode on a 51x51 sheet with short detection durations."""
    rng = np.random.default_rng(seed)
    dur = float(rng.choice([400.0, 600.0, 800.0]))
    det = DetectionParams(dur={z: dur for z in ZoneId}, redetect_dur={z: dur for z in ZoneId})
    icd = IcdConfig(detection=det)
    cl = float(rng.integers(290, 340))
    episode = FocalEpisode("focus", (14, 32), (cl, cl), 1, 0.0, float(rng.integers(200, 500)))
    orch = OrchestratorParams(segment_ms=int(rng.choice([250, 500])), checkpoint_ms=1000,
                              observation_ms=float(rng.integers(800, 2000)),
                              charge_delay_ms=float(rng.choice([0.0, 300.0, 700.0])), nsr_warmup_ms=4000.0,
                              slow_beats=int(rng.integers(3, 6)), sinus_cl_ms=500.0, max_extension_ms=8000.0)
    return Scenario(SMALL, episode, icd, duration_ms=5000.0, seed=int(seed), orchestrator=orch)


def uninterrupted(scenario, result):
    """Oracle: one straight run with every delivered stimulus known in advance."""
    prep = prepare(scenario)
    n = int(round(result.final_state.t_ms - prep.state0.t_ms))
    state, raw = prep.sim.run_segment(prep.state0, n, result.stimuli, prep.weights)
    return state, synth_egm(ProbeSamples.from_segment(prep.state0.t_ms, raw), prep.leads)


# ---------------------------------------------------------------- acceptance summary

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if rep.failed:
        msg = str(rep.longrepr.reprcrash.message).splitlines()[0] if hasattr(rep.longrepr, "reprcrash") else "failed"
        detail = f"{detail}; {msg}" if detail else msg
    _ACCEPTANCE[number] = ("PASS" if rep.passed else "FAIL", title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        status, title, detail = _ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] {number:2d}. {title}" + (f" ({detail})" if detail else ""))
