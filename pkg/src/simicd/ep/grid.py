"""
Tissue sheet geometry.

Node ``(i, j)`` sits at ``x = j*dx``, ``y = i*dx`` (mm). Node conductivity is a
dimensionless scaling field multiplied by the tuned diffusivity ``D0``; each
edge carries the harmonic mean of its two node values, so scar (zero)
nodes block flux on all sides.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["TissueGrid", "sheet", "add_elliptical_scar", "block_mask", "TIP_BLOCK"]

TIP_BLOCK = 5


def _harmonic(a, b):
    s = a + b
    safe = np.where(s > 0, s, 1.0)
    return np.where(s > 0, 2.0 * a * b / safe, 0.0)


@dataclass(frozen=True, eq=False)
class TissueGrid:
    nx: int
    ny: int
    dx_mm: float = 0.5
    diffusivity: float = 0.2  # D0, mm^2/ms, for conductivity 1
    conductivity: np.ndarray = None
    scar_mask: np.ndarray = None
    isthmus_mask: np.ndarray = None
    sinus_site: np.ndarray = None
    ectopic_sites: dict = field(default_factory=dict)
    tip_footprint: np.ndarray = None
    isthmus_factor: float = 1.0
    isthmus_axis: tuple = None  # ((x0, y0), (x1, y1)) ends of the isthmus centre line, mm
    tau_close_scale: np.ndarray = None  # per-node multiplier on the membrane tau_close

    def __post_init__(self):
        shape = (self.ny, self.nx)
        zeros = np.zeros(shape, dtype=bool)
        if self.conductivity is None:
            object.__setattr__(self, "conductivity", np.ones(shape))
        if self.scar_mask is None:
            object.__setattr__(self, "scar_mask", zeros.copy())
        if self.isthmus_mask is None:
            object.__setattr__(self, "isthmus_mask", zeros.copy())
        if self.sinus_site is None:
            object.__setattr__(self, "sinus_site", zeros.copy())
        if self.tip_footprint is None:
            object.__setattr__(self, "tip_footprint", zeros.copy())
        if self.tau_close_scale is None:
            object.__setattr__(self, "tau_close_scale", np.ones(shape))
        scale = np.asarray(self.tau_close_scale, dtype=float)
        if scale.shape != shape or np.any(scale <= 0):
            raise ValueError("tau_close_scale must be a positive field of the grid shape")
        object.__setattr__(self, "tau_close_scale", scale)
        sigma = np.asarray(self.conductivity, dtype=float)
        if sigma.shape != shape:
            raise ValueError("conductivity field has the wrong shape")
        if np.any(sigma < 0):
            raise ValueError("conductivity must be non-negative")
        sigma = np.where(self.scar_mask, 0.0, sigma)
        object.__setattr__(self, "conductivity", sigma)
        if np.any(self.isthmus_mask & self.scar_mask):
            raise ValueError("isthmus must not overlap scar")
        for name, mask in [("sinus_site", self.sinus_site), ("tip_footprint", self.tip_footprint),
                           *self.ectopic_sites.items()]:
            if mask.shape != shape:
                raise ValueError(f"{name} has the wrong shape")
        if self.diffusivity < 0:
            raise ValueError("diffusivity must be non-negative")

    @property
    def shape(self):
        return (self.ny, self.nx)

    @property
    def tissue(self):
        return ~self.scar_mask

    def coords(self):
        """Node ``(x, y)`` coordinates in mm as two ``(ny, nx)`` arrays."""
        return np.meshgrid(np.arange(self.nx) * self.dx_mm, np.arange(self.ny) * self.dx_mm)

    def node_at(self, x_mm, y_mm):
        j = int(round(x_mm / self.dx_mm))
        i = int(round(y_mm / self.dx_mm))
        if not (0 <= i < self.ny and 0 <= j < self.nx):
            raise ValueError(f"({x_mm}, {y_mm}) mm lies outside the sheet")
        return i, j

    def block_at(self, x_mm, y_mm, size=TIP_BLOCK):
        """Square ``size x size`` node block centred on the nearest node."""
        i, j = self.node_at(x_mm, y_mm)
        r = size // 2
        mask = np.zeros(self.shape, dtype=bool)
        mask[max(0, i - r):i + r + 1, max(0, j - r):j + r + 1] = True
        return mask

    def max_diffusivity(self, conductivity=None):
        sigma = self.conductivity if conductivity is None else conductivity
        return self.diffusivity * float(sigma.max(initial=0.0))

    def stable_dt(self):
        dmax = self.max_diffusivity()
        return np.inf if dmax == 0 else self.dx_mm ** 2 / (4.0 * dmax)

    def edge_conductances(self, conductivity=None):
        """
        Padded coupling arrays (1/ms) for the 5-point stencil.

        ``cx[i, j]`` couples columns ``j-1`` and ``j`` of row ``i`` and
        ``cy[i, j]`` couples rows ``i-1`` and ``i`` of column ``j``; the
        outermost entries are zero (no-flux boundary).
        """
        sigma = self.conductivity if conductivity is None else np.where(self.scar_mask, 0.0, conductivity)
        k = self.diffusivity / self.dx_mm ** 2
        cx = np.zeros((self.ny, self.nx + 1))
        cy = np.zeros((self.ny + 1, self.nx))
        cx[:, 1:-1] = k * _harmonic(sigma[:, :-1], sigma[:, 1:])
        cy[1:-1, :] = k * _harmonic(sigma[:-1, :], sigma[1:, :])
        return cx, cy

    def with_diffusivity(self, d0):
        return replace(self, diffusivity=float(d0))

    def digest(self):
        h = hashlib.sha256()
        h.update(np.array([self.nx, self.ny], dtype=np.int64).tobytes())
        h.update(np.array([self.dx_mm, self.diffusivity], dtype=np.float64).tobytes())
        for arr in (self.conductivity, self.scar_mask, self.isthmus_mask, self.sinus_site, self.tip_footprint,
                    self.tau_close_scale):
            h.update(np.ascontiguousarray(arr).tobytes())
        for name in sorted(self.ectopic_sites):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.ectopic_sites[name]).tobytes())
        return h.hexdigest()


def sheet(width_mm=50.0, height_mm=50.0, dx_mm=0.5, diffusivity=0.2):
    nx = int(round(width_mm / dx_mm)) + 1
    ny = int(round(height_mm / dx_mm)) + 1
    return TissueGrid(nx, ny, dx_mm, diffusivity)


def add_elliptical_scar(grid, center_mm, semi_axes_mm, isthmus_width_mm, isthmus_factor,
                        border_mm=0.0, border_tau_close_scale=1.0):
    """
    Elliptical scar split by a straight isthmus along its long axis.

    The isthmus conducts with ``isthmus_factor`` times the healthy
    conductivity; the two remaining lobes are removed from the domain.
    The isthmus and a rim ``border_mm`` wide around the ellipse form a
    border zone whose ``tau_close`` is multiplied by ``border_tau_close_scale``
    (prolonged refractoriness of remodelled tissue).
    """
    X, Y = grid.coords()
    cx, cy = center_mm
    ax, ay = semi_axes_mm
    inside = ((X - cx) / ax) ** 2 + ((Y - cy) / ay) ** 2 <= 1.0
    if ay >= ax:
        strip = np.abs(X - cx) <= isthmus_width_mm / 2
        ends = ((cx, cy - ay), (cx, cy + ay))
    else:
        strip = np.abs(Y - cy) <= isthmus_width_mm / 2
        ends = ((cx - ax, cy), (cx + ax, cy))
    isthmus = inside & strip
    scar = inside & ~strip
    sigma = np.array(grid.conductivity, dtype=float)
    sigma[isthmus] = isthmus_factor
    rim = ((X - cx) / (ax + border_mm)) ** 2 + ((Y - cy) / (ay + border_mm)) ** 2 <= 1.0
    scale = np.array(grid.tau_close_scale, dtype=float)
    scale[rim & ~scar] = border_tau_close_scale
    return replace(grid, conductivity=sigma, scar_mask=grid.scar_mask | scar,
                   isthmus_mask=grid.isthmus_mask | isthmus, isthmus_factor=float(isthmus_factor),
                   isthmus_axis=ends, tau_close_scale=scale)


def block_mask(grid, end, length_mm):
    """
    Isthmus nodes within ``length_mm`` of one end (``0`` = first end of
    ``isthmus_axis``, ``1`` = second).
    """
    if grid.isthmus_axis is None:
        raise ValueError("grid has no isthmus")
    X, Y = grid.coords()
    (x0, y0), (x1, y1) = grid.isthmus_axis
    ux, uy = x1 - x0, y1 - y0
    length = np.hypot(ux, uy)
    s = ((X - x0) * ux + (Y - y0) * uy) / length  # distance along the axis from end 0
    if end == 0:
        sel = s <= length_mm
    else:
        sel = s >= length - length_mm
    return grid.isthmus_mask & sel
