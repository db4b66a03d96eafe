"""
Closed-loop device/tissue co-simulation.

The tissue model runs ahead in fixed segments and hands each committed EGM
segment to the device, which senses beats, runs zone detection and
prescribes therapy. A prescription at beat time ``Tb`` schedules stimuli
from ``Ts >= Tb``; the tissue is then restored from the latest checkpoint at
or before ``Ts`` and re-run with the therapy merged into its stimulus
schedule. Everything before ``Ts`` replays bit-identically, so beats the
device already consumed are reused rather than re-evaluated.
"""
from __future__ import annotations

import copy
import functools
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .device_logic import DetectionWindow, ZoneId, initial_zones, step_detector
from .egm import electrode_weights, synth_egm, ProbeSamples
from .ep.checkpoint import Checkpoint
from .ep.ionic import init_limit_cycle
from .ep.reentry import InductionError, induce_reentry
from .ep.solver import PeriodicStimulus, Simulator, StabilityError, Stimulus, StimulusSchedule, TissueState
from .sensing import (WINDOW_POST_MS, WINDOW_PRE_MS, BeatDetector, EgmTrace, SensingParams,
                      build_nsr_template, vtc_score)
from .therapy import (Scheme, TherapyKind, prescribe, schedule_atp, schedule_shock, select_scheme)

__all__ = [
    "Outcome",
    "EpisodeReport",
    "RunResult",
    "IcdEngine",
    "classify_termination",
    "run_closed_loop",
    "replay_open_loop",
    "episode_stimuli",
    "prepare",
    "initial_state",
]


class Outcome:
    NO_THERAPY = "no_therapy_needed"
    INHIBITED = "inhibited"
    TERMINATED = "terminated_after_k_therapies"
    EXHAUSTED = "therapy_exhausted"
    ERROR = "error"

    ALL = (NO_THERAPY, INHIBITED, TERMINATED, EXHAUSTED, ERROR)


def classify_termination(periods, params, slow_beats=10):
    """
    ``"terminated"`` once ``slow_beats`` consecutive periods are at or above
    the VT1 detection threshold, else ``"ongoing"``.
    """
    th = params.th[ZoneId.VT1]
    run = 0
    for p in periods:
        run = run + 1 if p >= th else 0
        if run >= slow_beats:
            return "terminated"
    return "ongoing"


def rhythm_label(periods, params):
    """Coarse label for the latest periods: ``sinus`` or the zone of the median period."""
    if not periods:
        return "unknown"
    med = float(np.median(periods))
    zone = None
    for z in ZoneId:
        if med < params.th[z]:
            zone = z
    return "sinus" if zone is None else zone.name


@dataclass
class EpisodeReport:
    outcome: str
    n_therapies: int
    therapies: list
    events: list
    final_rhythm: str
    sensed_beats: int
    zone_entries: int
    mean_period_ms: float | None
    t_end_ms: float
    scenario: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def rate_bpm(self):
        return None if not self.mean_period_ms else 60000.0 / self.mean_period_ms

    def summary(self):
        """JSON-ready summary (no event list)."""
        out = {k: v for k, v in asdict(self).items() if k != "events"}
        out["rate_bpm"] = self.rate_bpm
        return out

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)

    def events_jsonl(self):
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.events)

    def check_consistency(self):
        """Mechanical outcome/event-log agreement; raises AssertionError on mismatch."""
        kinds = [e["kind"] for e in self.events if e["type"] == "therapy"]
        delivered = [k for k in kinds if k != TherapyKind.INHIBIT.value]
        assert self.outcome in Outcome.ALL
        assert len(delivered) == self.n_therapies
        ts = [e["t_ms"] for e in self.events]
        assert all(a <= b for a, b in zip(ts, ts[1:])), "event times must be non-decreasing"
        if self.outcome == Outcome.NO_THERAPY:
            assert not kinds
        if self.outcome == Outcome.INHIBITED:
            assert kinds and not delivered
        if self.outcome == Outcome.TERMINATED:
            assert delivered and any(e["type"] == "terminated" for e in self.events)
        if self.outcome == Outcome.EXHAUSTED:
            assert any(e["type"] == "therapy_exhausted" for e in self.events)


@dataclass
class RunResult:
    report: EpisodeReport
    egm: EgmTrace
    final_state: TissueState | None
    stimuli: StimulusSchedule
    template: object = None


# ------------------------------------------------------------------ device

class _Buffer:
    """Committed EGM samples at 1 ms cadence."""

    def __init__(self, t0_ms=0.0):
        self.t0 = t0_ms
        self.nf = np.zeros(0)
        self.ff = np.zeros(0)

    @property
    def t_end(self):
        return self.t0 + self.nf.size

    def append(self, trace):
        if self.nf.size == 0:
            self.t0 = trace.t0_ms
        elif not math.isclose(trace.t0_ms, self.t_end, abs_tol=1e-9):
            raise ValueError(f"EGM segment starts at {trace.t0_ms}, expected {self.t_end}")
        self.nf = np.concatenate([self.nf, trace.nf_mV])
        self.ff = np.concatenate([self.ff, trace.ff_mV])

    def truncate(self, t_ms):
        n = max(0, int(round(t_ms - self.t0)))
        self.nf = self.nf[:n]
        self.ff = self.ff[:n]

    def trace(self):
        return EgmTrace(self.t0, self.nf.copy(), self.ff.copy(), 1.0)


@dataclass(frozen=True)
class TherapyOrder:
    """Stimuli the device wants delivered, and the earliest of their onsets."""

    onset_ms: float
    end_ms: float
    stimuli: tuple


class IcdEngine:
    """
    Single-owner device state: sensing front end, detection window, zone
    states, therapy counters and the episode event log.

    ``feed`` commits EGM samples; ``drain`` processes every beat whose
    morphology window is complete and stops at the first therapy order.
    """

    def __init__(self, icd, orch, template=None, threshold_floor_mV=0.5):
        self.icd = icd
        self.orch = orch
        self.params = icd.detection
        self.template = template
        self.sensing = SensingParams(icd.sensing_refractory_ms, threshold_floor_mV)
        self.detector = BeatDetector(self.sensing)
        self.buffer = _Buffer()
        self.pending = deque()
        self.last_processed = -math.inf
        self.events = []
        self.counters = icd.counters()
        self.zones = initial_zones()
        self.window = DetectionWindow()
        self.prev_beat = None
        self.redetect = False
        self.blank_until = -math.inf
        self.blank_intervals = []
        self.observing = False
        self.obs_start = None
        self.post_periods = []
        self.shocks = 0
        self.therapies = []
        self.outcome = None
        self.all_periods = []
        self.n_beats = 0
        self.n_entries = 0
        self.inhibited = False

    # -- sample handling
    def feed(self, trace):
        self.buffer.append(trace)
        nf = trace.nf_mV
        t = trace.times
        blank = np.zeros(t.size, dtype=bool)
        for a, b in self.blank_intervals:
            blank |= (t >= a) & (t < b)
        if blank.any():
            # the sense amplifier is blanked while pacing, so paced responses never set the threshold
            nf = np.where(blank, 0.0, nf)
        for b in self.detector.feed(nf, trace.t0_ms):
            if b.t_ms > self.last_processed:
                self.pending.append(b.t_ms)

    def snapshot(self):
        return copy.deepcopy(self.detector)

    def rewind(self, detector_snapshot, t_ms):
        """Restore the sensing front end to a checkpoint at ``t_ms``; pending beats are dropped."""
        self.detector = copy.deepcopy(detector_snapshot)
        self.buffer.truncate(t_ms)
        self.pending.clear()

    def drain(self):
        while self.pending and self.outcome is None:
            t = self.pending[0]
            if t + WINDOW_POST_MS >= self.buffer.t_end:
                break
            self.pending.popleft()
            self.last_processed = t
            order = self._beat(t)
            if order is not None:
                return order
        return None

    # -- per-beat logic
    def _log(self, t, event_type, **fields):
        ev = {"t_ms": float(t), "type": event_type}
        ev.update(fields)
        self.events.append(ev)

    def _beat(self, t):
        if t < self.blank_until:
            return None
        prev, self.prev_beat = self.prev_beat, t
        self.n_beats += 1
        if prev is None:
            self._log(t, "sense")
            return None
        period = t - prev
        w = self._window(t) if self.template is not None else None
        vtc = vtc_score(w, self.template) if w is not None else 0.0
        self.all_periods.append(period)
        self._log(t, "sense", period_ms=period, vtc=round(vtc, 6))
        self.window = self.window.push(period, vtc, t)

        if self.observing:
            self.post_periods.append(period)
            if classify_termination(self.post_periods, self.params, self.orch.slow_beats) == "terminated":
                self._log(t, "terminated", n_therapies=len(self.therapies),
                          within_observation=bool(t <= self.obs_start + self.orch.observation_ms))
                self.outcome = Outcome.TERMINATED
                return None

        if not self.window.warm:
            return None
        old = self.zones
        self.zones, sustained = step_detector(old, self.window, self.params, self.redetect)
        for z in ZoneId:
            if self.zones[z].in_zone and not old[z].in_zone:
                self.n_entries += 1
                self._log(t, "zone_entry", zone=z.name)
            elif old[z].in_zone and not self.zones[z].in_zone:
                self._log(t, "zone_exit", zone=z.name)
        if sustained is None:
            return None
        self._log(t, "sustained", zone=sustained.name, t_zone_ms=self.zones[sustained].t_zone,
                  redetect=self.redetect)
        return self._prescribe(sustained, t)

    def _window(self, t):
        i = int(round(t - self.buffer.t0))
        i0, i1 = i - int(WINDOW_PRE_MS), i + int(WINDOW_POST_MS) + 1
        if i0 < 0 or i1 > self.buffer.ff.size:
            return None
        return self.buffer.ff[i0:i1]

    def _prescribe(self, zone, t):
        tcount_before = self.counters.tcount[zone]
        decision, counters = prescribe(zone, self.window, self.counters, self.params)
        kind = decision.kind
        if kind == TherapyKind.INHIBIT:
            self._log(t, "therapy", zone=zone.name, kind=kind.value)
            self.inhibited = True
            # detection restarts from scratch after an inhibited episode
            self.zones = initial_zones()
            return None
        if kind == TherapyKind.SHOCK:
            if self.shocks >= self.orch.max_shocks:
                self._log(t, "therapy_exhausted", zone=zone.name)
                self.outcome = Outcome.EXHAUSTED
                return None
            spec = schedule_shock(t, self.orch.charge_delay_ms, self.orch.shock_duration_ms,
                                  self.orch.shock_amplitude)
            self.shocks += 1
            stimuli = (Stimulus("all", spec.onset_ms, spec.duration_ms, spec.amplitude, "shock"),)
            info = {"zone": zone.name, "kind": kind.value, "onset_ms": spec.onset_ms,
                    "duration_ms": spec.duration_ms, "amplitude": spec.amplitude}
            order = TherapyOrder(spec.onset_ms, spec.end_ms, stimuli)
        else:
            scheme = select_scheme(zone, tcount_before)
            atp = self.icd.atp
            sched = schedule_atp(scheme, decision, atp[zone], atp.pulse_duration_ms, atp.amplitude)
            stimuli = tuple(Stimulus("tip", p, sched.pulse_duration_ms, sched.amplitude, "atp")
                            for p in sched.pulse_times_ms)
            info = {"zone": zone.name, "kind": kind.value, "scheme": Scheme(scheme).value,
                    "avg_vperiod_ms": decision.avg_vperiod_ms, "pulses": list(sched.pulse_times_ms)}
            order = TherapyOrder(sched.pulse_times_ms[0], sched.end_ms, stimuli)
        self.counters = counters.delivered()
        self.therapies.append(dict(info, t_ms=t))
        self._log(t, "therapy", **info)
        # blank through delivery, then re-detect on a fresh window
        self.blank_until = order.end_ms + self.orch.blanking_ms
        self.blank_intervals.append((order.onset_ms, self.blank_until))
        self.redetect = True
        self.zones = initial_zones()
        self.window = DetectionWindow()
        self.prev_beat = None
        self.observing = True
        self.obs_start = self.blank_until
        self.post_periods = []
        return order

    # -- summary
    def finish(self, t_end, error=None):
        if error is not None:
            outcome = Outcome.ERROR
        elif self.outcome is not None:
            outcome = self.outcome
        elif self.therapies:
            outcome = Outcome.ERROR
            error = "episode unresolved at end of run"
        elif self.inhibited:
            outcome = Outcome.INHIBITED
        else:
            outcome = Outcome.NO_THERAPY
        self._log(max([t_end] + [e["t_ms"] for e in self.events]), "outcome", outcome=outcome)
        periods = self.all_periods
        return EpisodeReport(
            outcome=outcome,
            n_therapies=len(self.therapies),
            therapies=self.therapies,
            events=self.events,
            final_rhythm=rhythm_label(periods[-10:], self.params),
            sensed_beats=self.n_beats,
            zone_entries=self.n_entries,
            mean_period_ms=float(np.mean(periods)) if periods else None,
            t_end_ms=float(t_end),
            error=error,
        )


# ------------------------------------------------------------------ tissue side

def episode_stimuli(scenario):
    """Sinus drive plus any scheduled ectopic bursts."""
    orch = scenario.orchestrator
    items = [PeriodicStimulus("sinus", 0.0, orch.sinus_cl_ms, 4.0, orch.sinus_amplitude)]
    ep = scenario.episode
    if ep.kind == "focal":
        for onset, n, cl in ep.bursts(scenario.seed):
            items.append(PeriodicStimulus(f"ectopic:{ep.site}", onset, cl, 4.0, orch.sinus_amplitude,
                                          stop_ms=onset + n * cl - cl / 2, label="ectopic"))
    return StimulusSchedule(items)


@functools.lru_cache(maxsize=8)
def _limit_cycle(ionic):
    return init_limit_cycle(ionic)


def initial_state(sim):
    vm0, h0 = _limit_cycle(sim.ionic)
    return TissueState.resting(sim.grid, sim.dt_ms, vm0, h0)


_CACHE = {}


def _nsr_calibration(sim, leads, orch, weights):
    """NSR template and lead gain from a sinus-only warm-up run (cached per configuration)."""
    key = ("nsr", sim.grid.digest(), sim.ionic, sim.dt_ms, leads, orch.nsr_warmup_ms, orch.sinus_cl_ms)
    if key not in _CACHE:
        sched = StimulusSchedule([PeriodicStimulus("sinus", 0.0, orch.sinus_cl_ms, 4.0, orch.sinus_amplitude)])
        _, raw = sim.run_segment(initial_state(sim), orch.nsr_warmup_ms, sched, weights)
        unit = synth_egm(ProbeSamples.from_segment(0.0, raw), leads)
        settled = np.abs(unit.nf_mV[int(orch.sinus_cl_ms):])
        peak = float(settled.max())
        if not peak > 0:
            raise RuntimeError("no near-field signal during the sinus warm-up")
        gain = orch.target_nf_peak_mV / peak
        trace = EgmTrace(0.0, unit.nf_mV * gain, unit.ff_mV * gain)
        template = build_nsr_template(trace)
        _CACHE[key] = (gain, template)
    return _CACHE[key]


def _induced_state(sim, scenario):
    protocol = scenario.induction_protocol
    key = ("vt", sim.grid.digest(), sim.ionic, sim.dt_ms, protocol)
    if key not in _CACHE:
        ck = induce_reentry(sim, initial_state(sim), protocol)
        s = ck.state
        # re-base so the episode starts at t = 0
        _CACHE[key] = TissueState(0, s.dt_ms, s.vm.copy(), s.h.copy(), s.act_ms - s.t_ms)
    return _CACHE[key].copy()


@dataclass
class Prepared:
    sim: Simulator
    leads: object
    weights: np.ndarray
    template: object
    state0: TissueState
    stimuli: StimulusSchedule


def prepare(scenario):
    """Grid, simulator, calibrated leads, NSR template and the episode's start state."""
    grid = scenario.grid()
    sim = Simulator(grid, scenario.preset.ionic, scenario.dt_ms)
    leads = scenario.preset.leads()
    weights = electrode_weights(grid, leads.electrodes, sim.ionic.vm_amp_mV)
    gain, template = _nsr_calibration(sim, leads, scenario.orchestrator, weights)
    leads = replace(leads, gain_mV=gain)
    if scenario.episode.kind == "reentrant":
        state0 = _induced_state(sim, scenario)
    else:
        state0 = initial_state(sim)
    return Prepared(sim, leads, weights, template, state0, episode_stimuli(scenario))


def run_closed_loop(scenario, prepared=None):
    """
    Run one episode with the device in the loop.

    Returns a :class:`RunResult`; simulation failures produce an ``error``
    outcome rather than an exception.
    """
    orch = scenario.orchestrator
    try:
        prep = prepared or prepare(scenario)
    except (InductionError, StabilityError, RuntimeError, ValueError) as exc:
        engine = IcdEngine(scenario.icd, orch)
        report = engine.finish(0.0, error=f"{type(exc).__name__}: {exc}")
        report.scenario = scenario_summary(scenario)
        return RunResult(report, EgmTrace(0.0, np.zeros(0), np.zeros(0)), None, StimulusSchedule())

    sim = prep.sim
    engine = IcdEngine(scenario.icd, orch, prep.template, 0.1 * orch.target_nf_peak_mV)
    schedule = prep.stimuli
    state = prep.state0.copy()
    t_stop = float(scenario.duration_ms)
    checkpoints = [(state.t_ms, Checkpoint.capture(state, sim), engine.snapshot())]
    pending_mark = None  # pre-therapy checkpoint time
    error = None
    seg = orch.segment_ms

    try:
        while engine.outcome is None:
            t = state.t_ms
            # after a therapy the run is extended until the episode resolves, within a hard cap
            limit = t_stop + orch.max_extension_ms if engine.observing else t_stop
            limit = math.ceil(limit - 1e-9)
            if t >= limit - 1e-9:
                break
            nxt = min((math.floor(t / seg + 1e-9) + 1) * seg, limit)
            if pending_mark is not None and t < pending_mark < nxt:
                nxt = pending_mark
            dur = int(round(nxt - t))
            state, raw = sim.run_segment(state, dur, schedule, prep.weights)
            if not np.all(np.isfinite(state.vm)):
                raise FloatingPointError("non-finite membrane potential")
            engine.feed(synth_egm(ProbeSamples.from_segment(t, raw), prep.leads))
            tn = state.t_ms
            if (abs(tn / orch.checkpoint_ms - round(tn / orch.checkpoint_ms)) < 1e-9
                    or (pending_mark is not None and abs(tn - pending_mark) < 1e-9)):
                checkpoints.append((tn, Checkpoint.capture(state, sim), engine.snapshot()))
                if pending_mark is not None and abs(tn - pending_mark) < 1e-9:
                    pending_mark = None
            order = engine.drain()
            if order is None:
                continue
            schedule = schedule.merged(order.stimuli)
            # roll back to the latest checkpoint at or before the first therapy stimulus
            usable = [c for c in checkpoints if c[0] <= order.onset_ms + 1e-9]
            tc, ck, det = usable[-1]
            checkpoints = usable
            state = ck.restore(sim)
            engine.rewind(det, tc)
            engine._log(engine.last_processed, "rollback", restored_to_ms=tc, therapy_onset_ms=order.onset_ms)
            mark = float(math.floor(order.onset_ms))
            pending_mark = mark if mark > tc else None
    except (FloatingPointError, StabilityError) as exc:
        error = f"{type(exc).__name__}: {exc}"

    report = engine.finish(state.t_ms, error=error)
    report.scenario = scenario_summary(scenario)
    return RunResult(report, engine.buffer.trace(), state, schedule, prep.template)


def replay_open_loop(trace, icd, orch=None, template=None):
    """
    Run sensing, detection and prescription over a recorded EGM without
    feedback; therapies are logged (and blanked) but not delivered.
    """
    from .scenarios import OrchestratorParams
    orch = orch or OrchestratorParams()
    engine = IcdEngine(icd, orch, template, 0.1 * orch.target_nf_peak_mV)
    engine.feed(trace)
    while engine.outcome is None:
        order = engine.drain()
        if order is None:
            break
    report = engine.finish(trace.t_end_ms if len(trace) else 0.0)
    if report.outcome == Outcome.ERROR and report.error == "episode unresolved at end of run":
        report.error = "replay ended before the episode resolved"
    return report


def scenario_summary(scenario):
    ep = scenario.episode
    out = {
        "patient": scenario.patient_id,
        "episode": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(ep).items()},
        "duration_ms": scenario.duration_ms,
        "seed": scenario.seed,
        "detection": scenario.icd.detection.to_dict(),
        "atp": {z.name: asdict(p) for z, p in scenario.icd.atp.zones.items()},
        "max_t": {z.name: v for z, v in scenario.icd.max_t.items()},
    }
    return out
