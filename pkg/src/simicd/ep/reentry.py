"""
Re-entry induction around an isthmus scar.

Protocol: hold a conduction block over one end of the isthmus, deliver S1
just outside that end, and lift the block once the wave travelling down
the isthmus reaches the node next to the blocked segment. The wave then
leaves through the formerly blocked end into recovered tissue and keeps
circulating around both scar lobes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint
from .grid import block_mask
from .solver import Stimulus, StimulusSchedule

__all__ = ["InductionProtocol", "InductionError", "induce_reentry", "s1_site", "isthmus_probe", "cycle_lengths"]


class InductionError(RuntimeError):
    """Re-entry did not establish; ``activation_map`` holds last upstroke times."""

    def __init__(self, message, activation_map=None):
        super().__init__(message)
        self.activation_map = activation_map


@dataclass(frozen=True)
class InductionProtocol:
    block_end: int = 0
    block_length_mm: float = 2.5
    block_window_ms: float = 1000.0
    s1_time_ms: float = 0.0
    s1_site: object = None
    s1_amplitude: float = 450.0
    s1_count: int = 1
    s1_cl_ms: float = 400.0
    settle_ms: float = 3000.0
    min_cycles: int = 3


def _axis(grid):
    (x0, y0), (x1, y1) = grid.isthmus_axis
    L = math.hypot(x1 - x0, y1 - y0)
    return (x0, y0), ((x1 - x0) / L, (y1 - y0) / L), L


def s1_site(grid, end=0, width_mm=8.0, depth_mm=3.5, gap_mm=0.5):
    """Rectangle of tissue just beyond one end of the isthmus."""
    (x0, y0), (ux, uy), L = _axis(grid)
    X, Y = grid.coords()
    s = (X - x0) * ux + (Y - y0) * uy
    lateral = np.abs(-(X - x0) * uy + (Y - y0) * ux)
    if end == 0:
        along = (s < -gap_mm) & (s > -gap_mm - depth_mm)
    else:
        along = (s > L + gap_mm) & (s < L + gap_mm + depth_mm)
    return along & (lateral < width_mm / 2) & ~grid.scar_mask


def isthmus_probe(grid, fraction=0.5):
    """Node on the isthmus centre line at ``fraction`` of its length."""
    (x0, y0), (ux, uy), L = _axis(grid)
    i, j = grid.node_at(x0 + fraction * L * ux, y0 + fraction * L * uy)
    if grid.scar_mask[i, j]:
        raise ValueError("isthmus probe falls in scar")
    return i, j


def _restore_probe(grid, blocked, end):
    # centre-line isthmus node just past the blocked segment
    (x0, y0), (ux, uy), L = _axis(grid)
    X, Y = grid.coords()
    s = (X - x0) * ux + (Y - y0) * uy
    lateral = np.abs(-(X - x0) * uy + (Y - y0) * ux)
    free = grid.isthmus_mask & ~blocked
    gap = s - s[blocked].max() if end == 0 else s[blocked].min() - s
    cost = np.where(free & (gap > 0), gap + lateral, np.inf)
    return np.unravel_index(np.argmin(cost), cost.shape)


def cycle_lengths(times):
    return list(np.diff(np.asarray(times, dtype=float)))


def induce_reentry(simulator, state, protocol=None, probe=None):
    """
    Run the block-and-S1 protocol from ``state`` and return a checkpoint
    holding a self-sustained circuit.

    The checkpoint ``meta`` records the restore time and the isthmus-midpoint
    activation times seen while settling. Raises :class:`InductionError`
    when fewer than ``min_cycles`` circuit cycles follow the restore.
    """
    protocol = protocol or InductionProtocol()
    grid = simulator.grid
    if grid.isthmus_axis is None or not grid.isthmus_mask.any():
        raise ValueError("induction needs a grid with scar and isthmus")
    blocked = block_mask(grid, protocol.block_end, protocol.block_length_mm)
    sigma_block = np.where(blocked, 0.0, grid.conductivity)
    blocked_sim = simulator.with_conductivity(sigma_block)
    site = protocol.s1_site if protocol.s1_site is not None else s1_site(grid, protocol.block_end)
    # an S1 drive train adapts the tissue before the last beat is let through
    s1_times = [protocol.s1_time_ms + k * protocol.s1_cl_ms for k in range(protocol.s1_count)]
    sched = StimulusSchedule([Stimulus(site, t, 4.0, protocol.s1_amplitude, "s1") for t in s1_times])
    ri, rj = _restore_probe(grid, blocked, protocol.block_end)
    mi, mj = probe if probe is not None else isthmus_probe(grid)

    spm = simulator.steps_per_ms
    t_block_end = s1_times[-1] + protocol.block_window_ms
    restored_at = None
    while state.t_ms < t_block_end:
        state = blocked_sim.advance(state, spm, sched)
        if state.t_ms > s1_times[-1] and state.vm[ri, rj] > simulator.ionic.v_gate:
            restored_at = state.t_ms
            break
    if restored_at is None:
        raise InductionError("induction failed: wave never reached the blocked isthmus end", state.act_ms.copy())

    mids = []
    last = state.act_ms[mi, mj]
    t_stop = state.t_ms + protocol.settle_ms
    while state.t_ms < t_stop:
        state = simulator.advance(state, spm, sched)
        a = state.act_ms[mi, mj]
        if not np.isnan(a) and a != last:
            mids.append(float(a))
            last = a
    if len(mids) < protocol.min_cycles or state.t_ms - mids[-1] > 2 * max(cycle_lengths(mids) or [protocol.settle_ms]):
        raise InductionError(
            f"induction failed: {len(mids)} isthmus activations in {protocol.settle_ms:.0f} ms after restore",
            state.act_ms.copy())
    return Checkpoint.capture(state, simulator, restored_at_ms=restored_at, isthmus_activations_ms=mids)
