"""
Explicit monodomain solver on a 2D sheet.

Each step is operator split: diffusion (5-point stencil with harmonic-mean
edge conductances), then the membrane reaction, then stimulus injection.
Time is tracked as an integer step count so that segmented runs are
bit-identical to uninterrupted ones.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np

from .ionic import STIM_GAIN, IonicParams

__all__ = [
    "TissueState",
    "Stimulus",
    "PeriodicStimulus",
    "StimulusSchedule",
    "Simulator",
    "StabilityError",
    "ACTIVATION_THRESHOLD",
]

ACTIVATION_THRESHOLD = 0.5


class StabilityError(ValueError):
    pass


@numba.njit(cache=True)
def _advance(v, h, v2, h2, act, cx, cy, stim, a_close, n, k0, dt, tau_in, tau_out, tau_open, v_gate, v_act):
    ny = v.shape[0] - 2
    nx = v.shape[1] - 2
    a_in = dt / tau_in
    a_out = dt / tau_out
    a_open = dt / tau_open
    for k in range(n):
        t_new = (k0 + k + 1) * dt
        for i in range(1, ny + 1):
            for j in range(1, nx + 1):
                vv = v[i, j]
                flux = (cx[i - 1, j - 1] * (v[i, j - 1] - vv) + cx[i - 1, j] * (v[i, j + 1] - vv)
                        + cy[i - 1, j - 1] * (v[i - 1, j] - vv) + cy[i, j - 1] * (v[i + 1, j] - vv))
                vd = vv + dt * flux
                hh = h[i, j]
                vn = vd + hh * vd * vd * (1.0 - vd) * a_in - vd * a_out + dt * stim[i - 1, j - 1]
                if vd < v_gate:
                    h2[i, j] = hh + (1.0 - hh) * a_open
                else:
                    h2[i, j] = hh - hh * a_close[i - 1, j - 1]
                v2[i, j] = vn
                if vn >= v_act and vv < v_act:
                    act[i - 1, j - 1] = t_new
        tmp = v
        v = v2
        v2 = tmp
        tmp = h
        h = h2
        h2 = tmp
    return v, h, v2, h2


@numba.njit(cache=True)
def _diffuse(v, v2, cx, cy, n, dt):
    ny = v.shape[0] - 2
    nx = v.shape[1] - 2
    for k in range(n):
        for i in range(1, ny + 1):
            for j in range(1, nx + 1):
                vv = v[i, j]
                v2[i, j] = vv + dt * (cx[i - 1, j - 1] * (v[i, j - 1] - vv) + cx[i - 1, j] * (v[i, j + 1] - vv)
                                      + cy[i - 1, j - 1] * (v[i - 1, j] - vv) + cy[i, j - 1] * (v[i + 1, j] - vv))
        tmp = v
        v = v2
        v2 = tmp
    return v, v2


@numba.njit(cache=True)
def _source_projection(v, cx, cy, weights, out):
    # out[e] = sum over nodes of weights[e] * (stencil flux of v)
    ny = v.shape[0] - 2
    nx = v.shape[1] - 2
    ne = weights.shape[0]
    for e in range(ne):
        out[e] = 0.0
    for i in range(1, ny + 1):
        for j in range(1, nx + 1):
            vv = v[i, j]
            flux = (cx[i - 1, j - 1] * (v[i, j - 1] - vv) + cx[i - 1, j] * (v[i, j + 1] - vv)
                    + cy[i - 1, j - 1] * (v[i - 1, j] - vv) + cy[i, j - 1] * (v[i + 1, j] - vv))
            if flux != 0.0:
                for e in range(ne):
                    out[e] += weights[e, i - 1, j - 1] * flux


def _pad(a, fill):
    out = np.full((a.shape[0] + 2, a.shape[1] + 2), fill, dtype=float)
    out[1:-1, 1:-1] = a
    return out


@dataclass(eq=False)
class TissueState:
    """
    Membrane state at integer step ``step`` of size ``dt_ms``.

    ``act_ms`` holds each node's latest upstroke time (NaN before any).
    Scar nodes stay at ``(0, 1)`` and never activate.
    """

    step: int
    dt_ms: float
    vm: np.ndarray
    h: np.ndarray
    act_ms: np.ndarray = None

    def __post_init__(self):
        if self.act_ms is None:
            self.act_ms = np.full(self.vm.shape, np.nan)

    @property
    def t_ms(self):
        return self.step * self.dt_ms

    @classmethod
    def resting(cls, grid, dt_ms=0.05, vm0=0.0, h0=1.0, t_ms=0.0):
        vm = np.where(grid.scar_mask, 0.0, vm0)
        h = np.where(grid.scar_mask, 1.0, h0)
        return cls(int(round(t_ms / dt_ms)), dt_ms, vm.astype(float), h.astype(float))

    def copy(self):
        return TissueState(self.step, self.dt_ms, self.vm.copy(), self.h.copy(), self.act_ms.copy())

    def identical(self, other):
        """Bit-for-bit equality (NaN-aware for activation times)."""
        return (self.step == other.step and self.dt_ms == other.dt_ms
                and np.array_equal(self.vm, other.vm) and np.array_equal(self.h, other.h)
                and np.array_equal(self.act_ms, other.act_ms, equal_nan=True))


@dataclass(frozen=True)
class Stimulus:
    """
    One rectangular current pulse.

    ``site`` names a grid site (``"sinus"``, ``"tip"``, ``"all"`` or
    ``"ectopic:<name>"``) or is an explicit boolean mask.
    """

    site: object
    onset_ms: float
    duration_ms: float
    amplitude: float
    label: str = ""

    def __post_init__(self):
        if not self.duration_ms > 0:
            raise ValueError("stimulus duration must be positive")


@dataclass(frozen=True)
class PeriodicStimulus:
    site: object
    start_ms: float
    period_ms: float
    duration_ms: float
    amplitude: float
    stop_ms: float = math.inf
    label: str = "sinus"

    def __post_init__(self):
        if not (self.period_ms > 0 and self.duration_ms > 0):
            raise ValueError("period and duration must be positive")

    def pulses(self, t0_ms, t1_ms):
        """Expand to single pulses overlapping ``[t0_ms, t1_ms)``."""
        first = max(0, math.floor((t0_ms - self.start_ms - self.duration_ms) / self.period_ms))
        out = []
        k = first
        while True:
            onset = self.start_ms + k * self.period_ms
            if onset >= t1_ms or onset >= self.stop_ms:
                break
            if onset + self.duration_ms > t0_ms:
                out.append(Stimulus(self.site, onset, self.duration_ms, self.amplitude, self.label))
            k += 1
        return out


@dataclass(frozen=True)
class StimulusSchedule:
    items: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))

    def merged(self, *more):
        items = list(self.items)
        for m in more:
            items.extend(m.items if isinstance(m, StimulusSchedule) else m)
        return StimulusSchedule(tuple(items))

    def pulses(self, t0_ms, t1_ms):
        out = []
        for it in self.items:
            if isinstance(it, PeriodicStimulus):
                out.extend(it.pulses(t0_ms, t1_ms))
            elif it.onset_ms < t1_ms and it.onset_ms + it.duration_ms > t0_ms:
                out.append(it)
        return out


def _to_steps(t_ms, dt):
    # first step index whose start time is >= t_ms
    return math.ceil(t_ms / dt - 1e-9)


class Simulator:
    """
    Monodomain stepping for one grid and membrane model.

    Parameters
    ----------
    grid : TissueGrid
    ionic : IonicParams
    dt_ms : float
        Explicit step; must satisfy ``dt <= dx^2 / (4 D_max)``.
    conductivity : ndarray, optional
        Temporary node-conductivity override (used for conduction block).
    """

    def __init__(self, grid, ionic=None, dt_ms=0.05, conductivity=None):
        self.grid = grid
        self.ionic = ionic or IonicParams()
        self.dt_ms = float(dt_ms)
        sigma = grid.conductivity if conductivity is None else conductivity
        dmax = grid.max_diffusivity(sigma)
        if dmax > 0 and self.dt_ms > grid.dx_mm ** 2 / (4.0 * dmax) * (1 + 1e-12):
            raise StabilityError(
                f"dt={self.dt_ms} ms exceeds the explicit stability bound {grid.dx_mm ** 2 / (4 * dmax):.4g} ms")
        steps_per_ms = 1.0 / self.dt_ms
        if abs(steps_per_ms - round(steps_per_ms)) > 1e-9:
            raise ValueError("dt must divide 1 ms")
        self.steps_per_ms = int(round(steps_per_ms))
        self.cx, self.cy = grid.edge_conductances(sigma)
        self._tissue = (~grid.scar_mask).astype(float)
        # per-node gate closing rate; tau_close is stretched in remodelled tissue
        self._a_close = self.dt_ms / (self.ionic.tau_close * grid.tau_close_scale)

    def with_conductivity(self, conductivity):
        return Simulator(self.grid, self.ionic, self.dt_ms, conductivity)

    def resolve_site(self, site):
        g = self.grid
        if isinstance(site, np.ndarray):
            return site.astype(bool)
        if site == "sinus":
            return g.sinus_site
        if site == "tip":
            return g.tip_footprint
        if site == "all":
            return ~g.scar_mask
        if isinstance(site, str) and site.startswith("ectopic:"):
            return g.ectopic_sites[site.split(":", 1)[1]]
        raise KeyError(f"unknown stimulus site {site!r}")

    def _stim_field(self, pulses, k):
        dt = self.dt_ms
        field_ = np.zeros(self.grid.shape)
        for p in pulses:
            if _to_steps(p.onset_ms, dt) <= k < _to_steps(p.onset_ms + p.duration_ms, dt):
                field_ += p.amplitude * STIM_GAIN * self.resolve_site(p.site)
        return field_ * self._tissue

    def _breakpoints(self, pulses, k0, k1):
        dt = self.dt_ms
        pts = {k0, k1}
        for p in pulses:
            for t in (p.onset_ms, p.onset_ms + p.duration_ms):
                k = _to_steps(t, dt)
                if k0 < k < k1:
                    pts.add(k)
        return sorted(pts)

    def advance(self, state, n_steps, stimuli=None):
        """Advance ``n_steps`` steps; returns a new state."""
        if state.dt_ms != self.dt_ms:
            raise ValueError("state was produced with a different time step")
        new = state.copy()
        if n_steps <= 0:
            return new
        sched = stimuli or StimulusSchedule()
        k0, k1 = state.step, state.step + n_steps
        pulses = sched.pulses(k0 * self.dt_ms, k1 * self.dt_ms)
        v = _pad(new.vm, 0.0)
        h = _pad(new.h, 1.0)
        v2 = v.copy()
        h2 = h.copy()
        p = self.ionic
        pts = self._breakpoints(pulses, k0, k1)
        for a, b in zip(pts, pts[1:]):
            stim = self._stim_field(pulses, a)
            v, h, v2, h2 = _advance(v, h, v2, h2, new.act_ms, self.cx, self.cy, stim, self._a_close, b - a, a,
                                    self.dt_ms, p.tau_in, p.tau_out, p.tau_open, p.v_gate, ACTIVATION_THRESHOLD)
        new.vm = v[1:-1, 1:-1].copy()
        new.h = h[1:-1, 1:-1].copy()
        new.step = k1
        return new

    def step(self, state, stimuli=None):
        return self.advance(state, 1, stimuli)

    def diffuse(self, state, n_steps=1):
        """Diffusion only (reaction and stimuli disabled)."""
        new = state.copy()
        v = _pad(new.vm, 0.0)
        v, _ = _diffuse(v, v.copy(), self.cx, self.cy, n_steps, self.dt_ms)
        new.vm = v[1:-1, 1:-1].copy()
        new.step = state.step + n_steps
        return new

    def source_projection(self, vm, weights):
        """Sum over nodes of ``weights * L(vm)``, ``L`` the diffusion stencil (1/ms)."""
        out = np.zeros(weights.shape[0])
        _source_projection(_pad(np.asarray(vm, dtype=float), 0.0), self.cx, self.cy, weights, out)
        return out

    def run_segment(self, state, duration_ms, stimuli=None, probe_weights=None):
        """
        Advance ``duration_ms`` (whole ms) and sample ``probe_weights`` once per
        ms at the start of each ms.

        Returns ``(state', samples)`` where ``samples`` has shape
        ``(duration_ms, n_probes)`` (zero columns when no probes are given).
        """
        n_ms = int(round(duration_ms))
        if abs(duration_ms - n_ms) > 1e-9:
            raise ValueError("segments are whole milliseconds")
        if state.step % self.steps_per_ms:
            raise ValueError("segments must start on a millisecond boundary")
        n_probes = 0 if probe_weights is None else probe_weights.shape[0]
        samples = np.zeros((n_ms, n_probes))
        if n_ms == 0:
            return state.copy(), samples
        sched = stimuli or StimulusSchedule()
        k0 = state.step
        k1 = k0 + n_ms * self.steps_per_ms
        pulses = sched.pulses(k0 * self.dt_ms, k1 * self.dt_ms)
        marks = set(self._breakpoints(pulses, k0, k1))
        if n_probes:
            marks.update(range(k0, k1, self.steps_per_ms))
        pts = sorted(marks)

        new = state.copy()
        v = _pad(new.vm, 0.0)
        h = _pad(new.h, 1.0)
        v2 = v.copy()
        h2 = h.copy()
        p = self.ionic
        stim = None
        stim_key = None
        for a, b in zip(pts, pts[1:]):
            if n_probes and (a - k0) % self.steps_per_ms == 0:
                _source_projection(v, self.cx, self.cy, probe_weights, samples[(a - k0) // self.steps_per_ms])
            key = tuple(i for i, q in enumerate(pulses)
                        if _to_steps(q.onset_ms, self.dt_ms) <= a < _to_steps(q.onset_ms + q.duration_ms, self.dt_ms))
            if key != stim_key:
                stim = self._stim_field(pulses, a)
                stim_key = key
            v, h, v2, h2 = _advance(v, h, v2, h2, new.act_ms, self.cx, self.cy, stim, self._a_close, b - a, a,
                                    self.dt_ms, p.tau_in, p.tau_out, p.tau_open, p.v_gate, ACTIVATION_THRESHOLD)
        new.vm = v[1:-1, 1:-1].copy()
        new.h = h[1:-1, 1:-1].copy()
        new.step = k1
        return new, samples
