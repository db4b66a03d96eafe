"""
Electrogram sensing front-end.

Turns a two-channel EGM (near-field tip-ring, far-field coil-can) into sensed
beats, ventricular periods and per-beat morphology correlation against a
patient NSR template.

Rate sensing runs on the rectified near-field channel with an adaptive
threshold; morphology is taken from the far-field channel.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "EgmTrace",
    "BeatEvent",
    "SensingParams",
    "NsrTemplate",
    "BeatDetector",
    "detect_beats",
    "compute_periods",
    "beat_window",
    "build_nsr_template",
    "vtc_score",
    "read_egm_csv",
    "write_egm_csv",
    "EgmFormatError",
    "WINDOW_PRE_MS",
    "WINDOW_POST_MS",
]

WINDOW_PRE_MS = 80.0
WINDOW_POST_MS = 120.0
PEAK_MEMORY_MS = 2000.0


class EgmFormatError(ValueError):
    """Malformed EGM CSV; ``line`` is the 1-based offending line."""

    def __init__(self, message, line):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class EgmTrace:
    """Uniformly sampled two-channel electrogram (mV)."""

    t0_ms: float
    nf_mV: np.ndarray
    ff_mV: np.ndarray
    dt_ms: float = 1.0

    def __post_init__(self):
        nf = np.asarray(self.nf_mV, dtype=float)
        ff = np.asarray(self.ff_mV, dtype=float)
        if nf.ndim != 1 or ff.shape != nf.shape:
            raise ValueError("near-field and far-field channels must be 1-D and equal length")
        if not self.dt_ms > 0:
            raise ValueError("dt_ms must be positive")
        if not (np.all(np.isfinite(nf)) and np.all(np.isfinite(ff))):
            raise ValueError("EGM contains non-finite samples")
        object.__setattr__(self, "nf_mV", nf)
        object.__setattr__(self, "ff_mV", ff)

    def __len__(self):
        return self.nf_mV.size

    @property
    def times(self):
        return self.t0_ms + self.dt_ms * np.arange(len(self))

    @property
    def t_end_ms(self):
        """Time one sample past the last one."""
        return self.t0_ms + self.dt_ms * len(self)

    def index_of(self, t_ms):
        return int(round((t_ms - self.t0_ms) / self.dt_ms))

    def slice_time(self, start_ms, stop_ms):
        """Sub-trace with samples in ``[start_ms, stop_ms)``."""
        i0 = max(0, self.index_of(start_ms))
        i1 = min(len(self), max(i0, self.index_of(stop_ms)))
        return EgmTrace(self.t0_ms + i0 * self.dt_ms, self.nf_mV[i0:i1], self.ff_mV[i0:i1], self.dt_ms)

    @staticmethod
    def concatenate(traces):
        traces = [tr for tr in traces if len(tr)]
        if not traces:
            raise ValueError("nothing to concatenate")
        dt = traces[0].dt_ms
        for a, b in zip(traces, traces[1:]):
            if b.dt_ms != dt or not math.isclose(a.t_end_ms, b.t0_ms, abs_tol=1e-9):
                raise ValueError("traces are not contiguous")
        return EgmTrace(
            traces[0].t0_ms,
            np.concatenate([tr.nf_mV for tr in traces]),
            np.concatenate([tr.ff_mV for tr in traces]),
            dt,
        )


@dataclass(frozen=True, order=True)
class BeatEvent:
    t_ms: float


@dataclass(frozen=True)
class SensingParams:
    """
    Parameters of the adaptive-threshold detector.

    ``threshold_floor_mV`` defaults to 10% of the nominal 5 mV near-field NSR
    peak produced by the default lead gain.
    """

    refractory_ms: float = 150.0
    threshold_floor_mV: float = 0.5
    adaptive_fraction: float = 0.5

    def __post_init__(self):
        if not self.refractory_ms > 0:
            raise ValueError("refractory_ms must be positive")
        if not 0 < self.adaptive_fraction < 1:
            raise ValueError("adaptive_fraction must lie in (0, 1)")
        if self.threshold_floor_mV < 0:
            raise ValueError("threshold_floor_mV must be non-negative")


@dataclass(frozen=True)
class NsrTemplate:
    window_mV: np.ndarray
    peak_mV: float
    dt_ms: float = 1.0

    def __len__(self):
        return self.window_mV.size


class BeatDetector:
    """
    Streaming adaptive-threshold beat detector.

    Samples are pushed in time order with :meth:`feed`; the detector is causal,
    so feeding a trace in pieces gives the same beats as feeding it whole.
    """

    def __init__(self, params=None, dt_ms=1.0):
        self.params = params or SensingParams()
        self.dt_ms = dt_ms
        self._memory = max(1, int(round(PEAK_MEMORY_MS / dt_ms)))
        self._peaks = deque()  # monotone (index, value) for sliding max
        self._n = 0
        self._prev = 0.0
        self._last_beat_idx = None
        self._refractory = self.params.refractory_ms / dt_ms

    def threshold(self):
        peak = self._peaks[0][1] if self._peaks else 0.0
        return max(self.params.threshold_floor_mV, self.params.adaptive_fraction * peak)

    def feed(self, nf_mV, t0_ms):
        """Consume samples starting at ``t0_ms``; return newly sensed beats."""
        x = np.abs(np.asarray(nf_mV, dtype=float))
        if not np.all(np.isfinite(x)):
            raise ValueError("EGM contains non-finite samples")
        beats = []
        peaks = self._peaks
        for k, val in enumerate(x.tolist()):
            i = self._n
            while peaks and peaks[-1][1] <= val:
                peaks.pop()
            peaks.append((i, val))
            while peaks[0][0] <= i - self._memory:
                peaks.popleft()
            thr = self.threshold()
            if val > thr and self._prev <= thr:
                if self._last_beat_idx is None or i - self._last_beat_idx >= self._refractory:
                    self._last_beat_idx = i
                    beats.append(BeatEvent(t0_ms + k * self.dt_ms))
            self._prev = val
            self._n += 1
        return beats


def detect_beats(trace, params=None):
    """Sense markers on ``trace`` (see :class:`BeatDetector`)."""
    if len(trace) == 0:
        return []
    return BeatDetector(params, trace.dt_ms).feed(trace.nf_mV, trace.t0_ms)


def compute_periods(beats):
    """Ventricular periods (ms) between consecutive beats."""
    times = [b.t_ms if isinstance(b, BeatEvent) else float(b) for b in beats]
    return [b - a for a, b in zip(times, times[1:])]


def beat_window(trace, t_ms):
    """
    Far-field samples in ``[t_ms - 80, t_ms + 120]`` or ``None`` when the
    window runs off either end of the trace.
    """
    i = trace.index_of(t_ms)
    i0 = i - int(round(WINDOW_PRE_MS / trace.dt_ms))
    i1 = i + int(round(WINDOW_POST_MS / trace.dt_ms)) + 1
    if i0 < 0 or i1 > len(trace):
        return None
    return trace.ff_mV[i0:i1].copy()


def build_nsr_template(nsr_trace, params=None):
    beats = detect_beats(nsr_trace, params)
    if len(beats) < 5:
        raise ValueError(f"insufficient NSR data: {len(beats)} beats sensed, need at least 5")
    windows = [w for w in (beat_window(nsr_trace, b.t_ms) for b in beats[1:-1]) if w is not None]
    if not windows:
        raise ValueError("insufficient NSR data: no complete beat windows")
    template = np.mean(windows, axis=0)
    return NsrTemplate(template, float(np.max(np.abs(template))), nsr_trace.dt_ms)


def vtc_score(beat_window, template):
    """
    Zero-lag normalised correlation of a far-field beat window with the
    template. Flat windows score 0.
    """
    w = np.asarray(beat_window, dtype=float)
    t = np.asarray(template.window_mV if isinstance(template, NsrTemplate) else template, dtype=float)
    if w.shape != t.shape:
        raise ValueError(f"window length {w.size} does not match template length {t.size}")
    w = w - w.mean()
    t = t - t.mean()
    nw = math.sqrt(float(np.dot(w, w)))
    nt = math.sqrt(float(np.dot(t, t)))
    if nw == 0.0 or nt == 0.0:
        return 0.0
    return float(min(1.0, max(-1.0, np.dot(w, t) / (nw * nt))))


def write_egm_csv(trace, path):
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["t_ms", "nf_mV", "ff_mV"])
        for t, a, b in zip(trace.times.tolist(), trace.nf_mV.tolist(), trace.ff_mV.tolist()):
            out.writerow([f"{t:.6g}", repr(a), repr(b)])
    return path


def read_egm_csv(path):
    """Parse the ``t_ms,nf_mV,ff_mV`` format; errors carry the line number."""
    rows_t, rows_nf, rows_ff = [], [], []
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EgmFormatError("empty file", 1)
        if [h.strip() for h in header] != ["t_ms", "nf_mV", "ff_mV"]:
            raise EgmFormatError(f"expected header t_ms,nf_mV,ff_mV, got {','.join(header)}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise EgmFormatError(f"expected 3 fields, got {len(row)}", lineno)
            try:
                t, a, b = (float(x) for x in row)
            except ValueError as exc:
                raise EgmFormatError(str(exc), lineno) from None
            if not all(math.isfinite(x) for x in (t, a, b)):
                raise EgmFormatError("non-finite value", lineno)
            if len(rows_t) >= 2:
                step = rows_t[1] - rows_t[0]
                if not math.isclose(t - rows_t[-1], step, rel_tol=1e-6, abs_tol=1e-6):
                    raise EgmFormatError("timestamps not at a fixed step", lineno)
            elif rows_t and not t > rows_t[-1]:
                raise EgmFormatError("timestamps not increasing", lineno)
            rows_t.append(t)
            rows_nf.append(a)
            rows_ff.append(b)
    if not rows_t:
        return EgmTrace(0.0, np.zeros(0), np.zeros(0))
    dt = rows_t[1] - rows_t[0] if len(rows_t) > 1 else 1.0
    return EgmTrace(rows_t[0], np.array(rows_nf), np.array(rows_ff), dt)
