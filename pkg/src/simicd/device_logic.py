"""
Rate-zone episode detection.

Each of the four tachy zones keeps an ``(in_zone, t_zone)`` state that is
advanced once per sensed beat over a moving window of the last ten
ventricular periods. Zone entry needs 8 of 10 fast periods (the newest one
included); the zone clock keeps accumulating while at least 6 of 10 stay
fast, and the episode is sustained once the clock reaches the zone duration.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

__all__ = [
    "ZoneId",
    "ZoneState",
    "DetectionParams",
    "DetectionWindow",
    "WINDOW_BEATS",
    "update_zone",
    "step_detector",
    "initial_zones",
]

WINDOW_BEATS = 10
ENTRY_COUNT = 8
PERSIST_COUNT = 6


class ZoneId(enum.IntEnum):
    """Tachy zones, ordered by severity."""

    VT1 = 0
    VT = 1
    VF1 = 2
    VF = 3

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class ZoneState:
    in_zone: bool = False
    t_zone: float = 0.0

    def __post_init__(self):
        if self.t_zone < 0:
            raise ValueError("t_zone must be non-negative")
        if self.t_zone > 0 and not self.in_zone:
            raise ValueError("zone clock can only run inside the zone")


def _zone_map(values):
    if isinstance(values, dict):
        return {ZoneId[k] if isinstance(k, str) else ZoneId(k): float(v) for k, v in values.items()}
    return {z: float(v) for z, v in zip(ZoneId, values)}


@dataclass(frozen=True)
class DetectionParams:
    """
    Detection thresholds (period, ms) and duration thresholds (ms) per zone.

    ``redetect_dur`` replaces ``dur`` once any therapy has been delivered.
    """

    th: dict = field(default_factory=lambda: {ZoneId.VT1: 429.0, ZoneId.VT: 353.0, ZoneId.VF1: 300.0, ZoneId.VF: 240.0})
    dur: dict = field(default_factory=lambda: {ZoneId.VT1: 2500.0, ZoneId.VT: 2500.0, ZoneId.VF1: 1000.0, ZoneId.VF: 1000.0})
    redetect_dur: dict = field(default_factory=lambda: {z: 1000.0 for z in ZoneId})
    vtc_threshold: float = 0.94
    corr_count_max: int = 3

    def __post_init__(self):
        for name in ("th", "dur", "redetect_dur"):
            m = _zone_map(getattr(self, name))
            if set(m) != set(ZoneId):
                raise ValueError(f"{name} must define all four zones")
            object.__setattr__(self, name, m)
        th = self.th
        if not th[ZoneId.VF] < th[ZoneId.VF1] < th[ZoneId.VT] < th[ZoneId.VT1]:
            raise ValueError("thresholds must satisfy th_VF < th_VF1 < th_VT < th_VT1")
        if min(th.values()) <= 0:
            raise ValueError("thresholds must be positive")
        if min(self.dur.values()) <= 0 or min(self.redetect_dur.values()) <= 0:
            raise ValueError("durations must be positive")
        if not -1.0 <= self.vtc_threshold <= 1.0:
            raise ValueError("vtc_threshold must lie in [-1, 1]")

    def duration(self, zone, redetect=False):
        return (self.redetect_dur if redetect else self.dur)[zone]

    def to_dict(self):
        return {
            "th": {z.name: v for z, v in self.th.items()},
            "dur": {z.name: v for z, v in self.dur.items()},
            "redetect_dur": {z.name: v for z, v in self.redetect_dur.items()},
            "vtc_threshold": self.vtc_threshold,
            "corr_count_max": self.corr_count_max,
        }


@dataclass(frozen=True)
class DetectionWindow:
    """The latest ten periods and VTC scores, oldest first."""

    periods: tuple = ()
    vtcs: tuple = ()
    last_beat_t_ms: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "periods", tuple(float(p) for p in self.periods))
        object.__setattr__(self, "vtcs", tuple(float(s) for s in self.vtcs))
        if len(self.periods) > WINDOW_BEATS or len(self.vtcs) > WINDOW_BEATS:
            raise ValueError("window holds at most ten beats")
        if any(p <= 0 for p in self.periods):
            raise ValueError("periods must be positive")

    @property
    def warm(self):
        return len(self.periods) == WINDOW_BEATS

    def push(self, period, vtc, t_ms):
        return DetectionWindow(
            (self.periods + (period,))[-WINDOW_BEATS:],
            (self.vtcs + (vtc,))[-WINDOW_BEATS:],
            t_ms,
        )


def initial_zones():
    return {z: ZoneState() for z in ZoneId}


def update_zone(state, window, zone, params, redetect=False):
    """Advance one zone by one beat; returns ``(new_state, sustained)``."""
    if not window.warm:
        return state, False
    th = params.th[zone]
    periods = window.periods
    last = periods[-1]
    fast = sum(1 for p in periods if p < th)

    in_next, t_next = state.in_zone, state.t_zone
    if fast >= ENTRY_COUNT and last < th:
        in_next = True
    if state.in_zone:
        if fast >= PERSIST_COUNT and last < th:
            t_next = state.t_zone + last
        else:
            in_next, t_next = False, 0.0
    # sustained test reads the post-update clock
    return ZoneState(in_next, t_next), t_next >= params.duration(zone, redetect)


def step_detector(zones, window, params, redetect=False):
    """
    Update all four zones on one beat.

    Returns the new zone states and the most severe zone that became
    sustained on this beat, or ``None``.
    """
    new = {}
    sustained = []
    for z in ZoneId:
        new[z], hit = update_zone(zones[z], window, z, params, redetect)
        if hit:
            sustained.append(z)
    return new, (max(sustained) if sustained else None)


def with_durations(params, **durations):
    """Copy of ``params`` with some zone durations replaced (by zone name)."""
    dur = dict(params.dur)
    dur.update({ZoneId[k]: float(v) for k, v in durations.items()})
    return replace(params, dur=dur)
