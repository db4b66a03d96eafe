"""Conduction-velocity measurement and diffusivity tuning on a 1D strip."""
from __future__ import annotations

import math

import numpy as np

from .grid import TissueGrid
from .ionic import IonicParams
from .solver import Simulator, Stimulus, StimulusSchedule, TissueState

__all__ = ["ConductionError", "measure_cv", "tune_conductivity"]


class ConductionError(ValueError):
    pass


def measure_cv(diffusivity, ionic=None, dx_mm=0.5, dt_ms=0.05, length_mm=50.0, timeout_ms=1000.0):
    """
    Plane-wave speed (mm/ms) on a strip paced from one end.

    Speed is taken between nodes at 30% and 70% of the strip length from
    their upstroke times. Returns ``None`` when the wave never reaches the
    far probe.
    """
    ionic = ionic or IonicParams()
    n = int(round(length_mm / dx_mm)) + 1
    grid = TissueGrid(n, 1, dx_mm, float(diffusivity))
    sim = Simulator(grid, ionic, dt_ms)
    site = np.zeros((1, n), dtype=bool)
    site[0, :3] = True
    sched = StimulusSchedule([Stimulus(site, 0.0, 4.0, 450.0)])
    state = TissueState.resting(grid, dt_ms)
    a, b = int(0.3 * (n - 1)), int(0.7 * (n - 1))
    chunk = 10.0
    t = 0.0
    while t < timeout_ms:
        state = sim.advance(state, int(round(chunk / dt_ms)), sched)
        t += chunk
        if not math.isnan(state.act_ms[0, b]):
            break
    ta, tb = state.act_ms[0, a], state.act_ms[0, b]
    if math.isnan(ta) or math.isnan(tb) or tb <= ta:
        return None
    return (b - a) * dx_mm / (tb - ta)


def tune_conductivity(target_cv, ionic=None, dx_mm=0.5, dt_ms=0.05, rel_tol=0.005, lo=None, hi=None, max_iter=40):
    """
    Bisect the healthy diffusivity ``D0`` (mm^2/ms) until the strip speed is
    within ``rel_tol`` of ``target_cv`` (mm/ms).

    The bracket defaults to ``[1e-3, dx^2/(4 dt)]``, i.e. up to the explicit
    stability limit. Raises :class:`ConductionError` with the measured
    bracket speeds when the target is outside them.
    """
    if not target_cv > 0:
        raise ValueError("target conduction velocity must be positive")
    if isinstance(dx_mm, TissueGrid):
        dx_mm = dx_mm.dx_mm
    lo = 1e-3 if lo is None else lo
    hi = dx_mm ** 2 / (4.0 * dt_ms) if hi is None else hi

    cv_lo = measure_cv(lo, ionic, dx_mm, dt_ms) or 0.0
    cv_hi = measure_cv(hi, ionic, dx_mm, dt_ms) or 0.0
    if not cv_lo <= target_cv <= cv_hi:
        raise ConductionError(
            f"target {target_cv} mm/ms outside reachable range [{cv_lo:.4g}, {cv_hi:.4g}] "
            f"for D0 in [{lo:.4g}, {hi:.4g}]")
    # speed grows roughly like sqrt(D0): bisect on sqrt
    a, b = math.sqrt(lo), math.sqrt(hi)
    for _ in range(max_iter):
        m = 0.5 * (a + b)
        cv = measure_cv(m * m, ionic, dx_mm, dt_ms) or 0.0
        if abs(cv - target_cv) <= rel_tol * target_cv:
            return m * m
        if cv < target_cv:
            a = m
        else:
            b = m
    raise ConductionError(f"bisection did not converge to {target_cv} mm/ms (last {cv:.4g})")
