"""
Electrogram synthesis from the transmembrane field.

The extracellular potential at an electrode is the infinite homogeneous
volume-conductor sum of the transmembrane source density ``-div(sigma grad Vm)``
weighted by ``1/r``. Channels are electrode differences: near-field is
tip - ring, far-field is coil - can.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .sensing import EgmTrace

__all__ = [
    "Electrode",
    "LeadConfig",
    "ProbeSamples",
    "ClearanceError",
    "electrode_weights",
    "phi_e",
    "synth_egm",
    "default_leads",
]


class ClearanceError(ValueError):
    pass


@dataclass(frozen=True)
class Electrode:
    """
    Point electrode, or a line electrode sampled at ``points`` (the coil).

    Coordinates are ``(x, y, z)`` in mm with the tissue sheet at ``z = 0``.
    """

    name: str
    points: tuple

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        if pts.shape[1] != 3:
            raise ValueError("electrode points are (x, y, z) triples")
        object.__setattr__(self, "points", tuple(map(tuple, pts.tolist())))

    @classmethod
    def point(cls, name, x, y, z):
        return cls(name, ((x, y, z),))

    @classmethod
    def segment(cls, name, start, stop, n_points=8):
        if n_points < 5:
            raise ValueError("line electrodes need at least 5 sample points")
        start = np.asarray(start, dtype=float)
        stop = np.asarray(stop, dtype=float)
        s = np.linspace(0.0, 1.0, n_points)[:, None]
        return cls(name, tuple(map(tuple, (start + s * (stop - start)).tolist())))

    def moved(self, dx=0.0, dy=0.0, dz=0.0):
        return Electrode(self.name, tuple((x + dx, y + dy, z + dz) for x, y, z in self.points))


@dataclass(frozen=True)
class LeadConfig:
    tip: Electrode = field(default_factory=lambda: Electrode.point("tip", 40.0, 10.0, 1.0))
    ring: Electrode = field(default_factory=lambda: Electrode.point("ring", 42.0, 12.0, 1.0))
    coil: Electrode = field(default_factory=lambda: Electrode.segment("coil", (33.0, 10.0, 2.0), (47.0, 10.0, 2.0)))
    can: Electrode = field(default_factory=lambda: Electrode.point("can", -100.0, 60.0, 40.0))
    gain_mV: float = 1.0

    def __post_init__(self):
        if self.tip.points == self.ring.points or self.coil.points == self.can.points:
            raise ValueError("channel electrodes must be distinct")

    @property
    def electrodes(self):
        """Probe order used by the sample matrix: tip, ring, coil, can."""
        return (self.tip, self.ring, self.coil, self.can)


def default_leads(gain_mV=1.0):
    return LeadConfig(gain_mV=gain_mV)


def electrode_weights(grid, electrodes, vm_amp_mV=100.0):
    """
    Per-node weights ``W[e]`` such that ``phi_e[e] = sum(W[e] * L(vm))`` with
    ``L`` the solver's diffusion stencil.

    Raises :class:`ClearanceError` when an electrode point is closer than a
    quarter of the grid spacing to a node.
    """
    X, Y = grid.coords()
    dV = grid.dx_mm ** 2
    W = np.zeros((len(electrodes),) + grid.shape)
    min_gap = 0.25 * grid.dx_mm
    for e, el in enumerate(electrodes):
        acc = np.zeros(grid.shape)
        for x, y, z in el.points:
            r = np.sqrt((X - x) ** 2 + (Y - y) ** 2 + z ** 2)
            if r.min() < min_gap:
                raise ClearanceError(f"electrode {el.name} at ({x}, {y}, {z}) is within {min_gap} mm of a node")
            acc += 1.0 / r
        # source density is the negative stencil divergence, in mV
        W[e] = -vm_amp_mV * dV * acc / len(el.points)
    W[:, grid.scar_mask] = 0.0
    return W


def phi_e(state, simulator, electrode, vm_amp_mV=None):
    """Extracellular potential (arbitrary units) at one electrode."""
    amp = simulator.ionic.vm_amp_mV if vm_amp_mV is None else vm_amp_mV
    W = electrode_weights(simulator.grid, [electrode], amp)
    return float(simulator.source_projection(state.vm, W)[0])


@dataclass(frozen=True)
class ProbeSamples:
    """Electrode potentials sampled at fixed 1 ms cadence (rows = samples)."""

    t_ms: np.ndarray
    values: np.ndarray

    @classmethod
    def from_segment(cls, t0_ms, values):
        values = np.asarray(values, dtype=float)
        return cls(t0_ms + np.arange(values.shape[0], dtype=float), values)


def synth_egm(samples, leads):
    """Form the near-field and far-field channels from tip/ring/coil/can samples."""
    t = np.asarray(samples.t_ms, dtype=float)
    vals = np.asarray(samples.values, dtype=float)
    if vals.ndim != 2 or vals.shape[1] != 4 or vals.shape[0] != t.size:
        raise ValueError("expected samples for tip, ring, coil and can")
    if t.size > 1 and not np.allclose(np.diff(t), 1.0, rtol=0, atol=1e-9):
        raise ValueError("probe samples are not at a gap-free 1 ms cadence")
    nf = leads.gain_mV * (vals[:, 0] - vals[:, 1])
    ff = leads.gain_mV * (vals[:, 2] - vals[:, 3])
    t0 = float(t[0]) if t.size else 0.0
    return EgmTrace(t0, nf, ff, 1.0)
