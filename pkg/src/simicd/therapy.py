"""
Therapy prescription and stimulus scheduling.

:func:`prescribe` picks ATP, quick-convert ATP, shock or inhibition for a
sustained zone; :func:`select_scheme` and :func:`schedule_atp` turn an ATP
decision into absolute pulse times.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

from .device_logic import ZoneId

__all__ = [
    "TherapyKind",
    "Scheme",
    "TherapyCounters",
    "TherapyDecision",
    "AtpZoneParams",
    "AtpParams",
    "PulseSchedule",
    "ShockSpec",
    "prescribe",
    "select_scheme",
    "schedule_atp",
    "schedule_shock",
    "NEW_P2",
    "NEW_P3",
    "PACING_AMPLITUDE",
    "SHOCK_AMPLITUDE",
]

# ATP output: twice the diastolic capture threshold (~70) of the 5x5-node tip block
PACING_AMPLITUDE = 140.0
SHOCK_AMPLITUDE = 5000.0
DEFAULT_CHARGE_DELAY_MS = 2000.0


class TherapyKind(str, enum.Enum):
    ATP = "ATP"
    QCATP = "QCATP"
    SHOCK = "Shock"
    INHIBIT = "Inhibit"


class Scheme(str, enum.Enum):
    BURST = "burst"
    RAMP = "ramp"
    QC = "qc"


# ATP rounds for the VT zones, in order of delivery
VT_PROGRESSION = (Scheme.BURST, Scheme.RAMP)


@dataclass(frozen=True)
class TherapyCounters:
    """Attempts used and allowed per zone, plus the initial-detection flag."""

    tcount: dict = field(default_factory=lambda: {z: 0 for z in ZoneId})
    max_t: dict = field(default_factory=lambda: {ZoneId.VT1: 2, ZoneId.VT: 2, ZoneId.VF1: 1, ZoneId.VF: 0})
    initial: bool = True

    def __post_init__(self):
        for name in ("tcount", "max_t"):
            m = getattr(self, name)
            m = {ZoneId[k] if isinstance(k, str) else ZoneId(k): int(v) for k, v in m.items()}
            for z in ZoneId:
                m.setdefault(z, 0)
            object.__setattr__(self, name, m)
        for z in ZoneId:
            if not 0 <= self.tcount[z] <= self.max_t[z]:
                raise ValueError(f"tcount for {z.name} outside [0, max]")

    def attempts_left(self, zone):
        return self.tcount[zone] < self.max_t[zone]

    def bump(self, zone):
        tc = dict(self.tcount)
        tc[zone] += 1
        return replace(self, tcount=tc)

    def delivered(self):
        """State after any therapy reaches the tissue."""
        return replace(self, initial=False)

    def reset(self):
        return TherapyCounters(max_t=dict(self.max_t))


@dataclass(frozen=True)
class TherapyDecision:
    kind: TherapyKind
    avg_vperiod_ms: float | None = None
    v_time_ms: float | None = None

    def __post_init__(self):
        if self.kind in (TherapyKind.ATP, TherapyKind.QCATP):
            if self.avg_vperiod_ms is None or self.v_time_ms is None:
                raise ValueError("ATP decisions carry the average period and beat time")


@dataclass(frozen=True)
class AtpZoneParams:
    pulse_interval_pct: float = 81.0
    coupling_interval_pct: float = 81.0
    n_pulses: int = 8
    ramp_decrement_ms: float = 10.0
    min_interval_ms: float = 220.0

    def __post_init__(self):
        for pct in (self.pulse_interval_pct, self.coupling_interval_pct):
            if not 0 < pct <= 100:
                raise ValueError("interval percentages must lie in (0, 100]")
        if self.n_pulses < 1:
            raise ValueError("n_pulses must be at least 1")
        if self.ramp_decrement_ms < 0:
            raise ValueError("ramp_decrement_ms must be non-negative")


NEW_P2 = AtpZoneParams(88.0, 88.0, 12, 5.0)
NEW_P3 = AtpZoneParams(88.0, 88.0, 8, 5.0)


def _default_atp():
    return {
        ZoneId.VT1: AtpZoneParams(81.0, 81.0, 8, 10.0),
        ZoneId.VT: AtpZoneParams(81.0, 81.0, 8, 10.0),
        ZoneId.VF1: AtpZoneParams(88.0, 88.0, 8, 0.0),
    }


@dataclass(frozen=True)
class AtpParams:
    zones: dict = field(default_factory=_default_atp)
    pulse_duration_ms: float = 4.0
    amplitude: float = PACING_AMPLITUDE

    def __post_init__(self):
        zones = _default_atp()
        for k, v in self.zones.items():
            z = ZoneId[k] if isinstance(k, str) else ZoneId(k)
            zones[z] = v if isinstance(v, AtpZoneParams) else AtpZoneParams(**v)
        object.__setattr__(self, "zones", zones)
        if self.pulse_duration_ms <= 0:
            raise ValueError("pulse duration must be positive")

    def __getitem__(self, zone):
        return self.zones[zone]

    def with_zone(self, zone, params):
        zones = dict(self.zones)
        zones[ZoneId[zone] if isinstance(zone, str) else zone] = params
        return replace(self, zones=zones)


@dataclass(frozen=True)
class PulseSchedule:
    pulse_times_ms: tuple
    reference_ms: float
    pulse_duration_ms: float = 4.0
    amplitude: float = PACING_AMPLITUDE

    def __post_init__(self):
        times = tuple(float(t) for t in self.pulse_times_ms)
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("pulse times must be strictly increasing")
        object.__setattr__(self, "pulse_times_ms", times)

    @property
    def intervals(self):
        """Coupling interval followed by the pulse-to-pulse intervals."""
        times = (self.reference_ms,) + self.pulse_times_ms
        return [b - a for a, b in zip(times, times[1:])]

    @property
    def end_ms(self):
        return self.pulse_times_ms[-1] + self.pulse_duration_ms


@dataclass(frozen=True)
class ShockSpec:
    onset_ms: float
    duration_ms: float = 10.0
    amplitude: float = SHOCK_AMPLITUDE

    def __post_init__(self):
        if self.duration_ms <= 0:
            raise ValueError("shock duration must be positive")

    @property
    def end_ms(self):
        return self.onset_ms + self.duration_ms


def prescribe(zone, window, counters, params):
    """
    Therapy for a zone flagged sustained on this beat.

    Returns ``(decision, counters')``; counters change only when (QC) ATP is
    prescribed.
    """
    zone = ZoneId(zone)
    avg = sum(window.periods[-4:]) / 4.0
    v_time = window.last_beat_t_ms

    if zone == ZoneId.VF1 and counters.attempts_left(ZoneId.VF1):
        return TherapyDecision(TherapyKind.QCATP, avg, v_time), counters.bump(zone)

    if zone in (ZoneId.VT, ZoneId.VT1) and counters.attempts_left(zone):
        corr_count = sum(1 for s in window.vtcs if s > params.vtc_threshold)
        if not counters.initial or corr_count <= params.corr_count_max:
            return TherapyDecision(TherapyKind.ATP, avg, v_time), counters.bump(zone)
        return TherapyDecision(TherapyKind.INHIBIT), counters

    return TherapyDecision(TherapyKind.SHOCK), counters


def select_scheme(zone, tcount_before):
    zone = ZoneId(zone)
    if zone == ZoneId.VF1:
        if tcount_before != 0:
            raise ValueError("quick-convert ATP is delivered once per episode")
        return Scheme.QC
    if zone in (ZoneId.VT, ZoneId.VT1):
        if not 0 <= tcount_before < len(VT_PROGRESSION):
            raise ValueError(f"no ATP round {tcount_before + 1} for {zone.name}; prescription should be Shock")
        return VT_PROGRESSION[tcount_before]
    raise ValueError(f"no ATP scheme in zone {zone.name}")


def schedule_atp(scheme, decision, params, pulse_duration_ms=4.0, amplitude=PACING_AMPLITUDE):
    """
    Absolute pulse times for an ATP decision.

    Burst (and QC) pulses follow the coupling interval at a constant pulse
    interval. Ramp intervals shrink by ``ramp_decrement_ms`` after the
    coupling interval, floored at ``min_interval_ms``.
    """
    if decision.kind not in (TherapyKind.ATP, TherapyKind.QCATP):
        raise ValueError(f"cannot schedule pulses for a {decision.kind.value} decision")
    avg = decision.avg_vperiod_ms
    if not avg > 0:
        raise ValueError("average ventricular period must be positive")
    scheme = Scheme(scheme)
    coupling = params.coupling_interval_pct / 100.0 * avg
    interval = params.pulse_interval_pct / 100.0 * avg

    t = decision.v_time_ms + coupling
    times = [t]
    for k in range(1, params.n_pulses):
        if scheme == Scheme.RAMP:
            gap = max(interval - k * params.ramp_decrement_ms, params.min_interval_ms)
        else:
            gap = interval
        t += gap
        times.append(t)
    return PulseSchedule(tuple(times), decision.v_time_ms, pulse_duration_ms, amplitude)


def schedule_shock(t_now_ms, delay_ms=DEFAULT_CHARGE_DELAY_MS, duration_ms=10.0, amplitude=SHOCK_AMPLITUDE):
    return ShockSpec(t_now_ms + delay_ms, duration_ms, amplitude)
