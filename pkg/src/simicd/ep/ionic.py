"""Two-variable phenomenological membrane model (single cell)."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numba
import numpy as np

__all__ = [
    "IonicParams",
    "ionic_step",
    "init_limit_cycle",
    "integrate_cell",
    "STIM_GAIN",
]

# stimulus amplitude units -> d(vm)/dt in 1/ms
STIM_GAIN = 1.0e-3


@dataclass(frozen=True)
class IonicParams:
    """
    Time constants (ms) and gate threshold of the membrane model.

    ``vm`` is normalised (0 rest, ~1 peak); ``vm_rest_mV`` and ``vm_amp_mV``
    map it to millivolts for electrogram synthesis only.
    """

    tau_in: float = 0.3
    tau_out: float = 6.0
    tau_open: float = 120.0
    tau_close: float = 150.0
    v_gate: float = 0.13
    vm_rest_mV: float = -80.0
    vm_amp_mV: float = 100.0

    def __post_init__(self):
        if min(self.tau_in, self.tau_out, self.tau_open, self.tau_close) <= 0:
            raise ValueError("time constants must be positive")
        if not 0 < self.v_gate < 1:
            raise ValueError("v_gate must lie in (0, 1)")

    def to_mV(self, vm):
        return self.vm_rest_mV + self.vm_amp_mV * vm

    def to_dict(self):
        return asdict(self)


def ionic_step(vm, h, p, dt_ms):
    """One forward-Euler step of the membrane model (no stimulus)."""
    if dt_ms > 0.1:
        raise ValueError("ionic step needs dt <= 0.1 ms")
    vm = np.asarray(vm, dtype=float)
    h = np.asarray(h, dtype=float)
    dv = h * vm * vm * (1.0 - vm) / p.tau_in - vm / p.tau_out
    dh = np.where(vm < p.v_gate, (1.0 - h) / p.tau_open, -h / p.tau_close)
    return vm + dt_ms * dv, h + dt_ms * dh


@numba.njit(cache=True)
def _cell_loop(v, h, n_steps, dt, tau_in, tau_out, tau_open, tau_close, v_gate, period_steps, stim_steps, stim_rate, trace):
    for k in range(n_steps):
        dv = h * v * v * (1.0 - v) / tau_in - v / tau_out
        if v < v_gate:
            dh = (1.0 - h) / tau_open
        else:
            dh = -h / tau_close
        if period_steps > 0 and k % period_steps < stim_steps:
            dv += stim_rate
        v = v + dt * dv
        h = h + dt * dh
        if trace.size:
            trace[k] = v
    return v, h


def integrate_cell(p, vm0, h0, duration_ms, dt_ms=0.05, pacing_cl_ms=0.0,
                   stim_amplitude=450.0, stim_duration_ms=4.0, record=False):
    """
    Integrate a single cell, optionally paced from ``t = 0`` at ``pacing_cl_ms``.

    Returns ``(vm, h)`` at the end, plus the vm trace when ``record`` is set.
    """
    n = int(round(duration_ms / dt_ms))
    period = int(round(pacing_cl_ms / dt_ms)) if pacing_cl_ms > 0 else 0
    trace = np.empty(n if record else 0)
    v, h = _cell_loop(float(vm0), float(h0), n, dt_ms, p.tau_in, p.tau_out, p.tau_open, p.tau_close,
                      p.v_gate, period, int(round(stim_duration_ms / dt_ms)), stim_amplitude * STIM_GAIN, trace)
    if record:
        return v, h, trace
    return v, h


def init_limit_cycle(p=None, cl_ms=800.0, n_cycles=100, dt_ms=0.05, stim_amplitude=450.0, stim_duration_ms=4.0):
    """
    Pace one cell from rest for ``n_cycles`` at ``cl_ms`` and return the
    end-diastolic state ``(vm, h)`` used to seed tissue nodes.
    """
    p = p or IonicParams()
    return integrate_cell(p, 0.0, 1.0, n_cycles * cl_ms, dt_ms, cl_ms, stim_amplitude, stim_duration_ms)
