"""
Plain SVG figures: EGM with therapy markers, and ventricular-period
evolution over the detection zone bands.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from .device_logic import ZoneId

__all__ = ["egm_svg", "periods_svg"]

WIDTH, HEIGHT = 900, 320
MARGIN = 50
ZONE_COLOURS = {ZoneId.VT1: "#fff3c4", ZoneId.VT: "#ffd8a8", ZoneId.VF1: "#ffb3a7", ZoneId.VF: "#f08080"}
THERAPY_COLOURS = {"ATP": "#1f77b4", "QCATP": "#9467bd", "Shock": "#d62728", "Inhibit": "#7f7f7f"}


class _Axes:
    def __init__(self, x0, x1, y0, y1, top=MARGIN, height=HEIGHT - 2 * MARGIN):
        self.x0, self.x1 = float(x0), float(x1) if x1 > x0 else float(x0) + 1.0
        self.y0, self.y1 = float(y0), float(y1) if y1 > y0 else float(y0) + 1.0
        self.top, self.height = top, height

    def x(self, v):
        return MARGIN + (np.asarray(v, dtype=float) - self.x0) / (self.x1 - self.x0) * (WIDTH - 2 * MARGIN)

    def y(self, v):
        return self.top + self.height - (np.asarray(v, dtype=float) - self.y0) / (self.y1 - self.y0) * self.height


def _polyline(xs, ys, colour, width=1.0):
    pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(xs, ys))
    return f'<polyline fill="none" stroke="{colour}" stroke-width="{width}" points="{pts}"/>'


def _text(x, y, s, size=11, anchor="start"):
    return f'<text x="{x:.1f}" y="{y:.1f}" font-size="{size}" font-family="sans-serif" text-anchor="{anchor}">{escape(s)}</text>'


def _doc(body, height=HEIGHT):
    return (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" '
            f'viewBox="0 0 {WIDTH} {height}">\n<rect width="100%" height="100%" fill="white"/>\n'
            + "\n".join(body) + "\n</svg>\n")


def _decimate(t, x, n_max=4000):
    """Min/max decimation so spikes survive downsampling."""
    if t.size <= n_max:
        return t, x
    k = int(np.ceil(t.size / (n_max // 2)))
    n = t.size // k * k
    tb = t[:n].reshape(-1, k)
    xb = x[:n].reshape(-1, k)
    lo, hi = xb.argmin(axis=1), xb.argmax(axis=1)
    rows = np.arange(tb.shape[0])
    first = np.minimum(lo, hi)
    second = np.maximum(lo, hi)
    tt = np.stack([tb[rows, first], tb[rows, second]], axis=1).ravel()
    xx = np.stack([xb[rows, first], xb[rows, second]], axis=1).ravel()
    return tt, xx


def egm_svg(trace, events=()):
    """Near-field and far-field channels stacked, with therapy markers."""
    t = trace.times / 1000.0
    body = []
    panel = (HEIGHT - 2 * MARGIN) // 2
    t0, t1 = (t[0], t[-1]) if t.size else (0.0, 1.0)
    for k, (name, x) in enumerate((("near-field", trace.nf_mV), ("far-field", trace.ff_mV))):
        top = MARGIN + k * (panel + 10)
        lim = float(np.max(np.abs(x))) if x.size else 1.0
        lim = lim or 1.0
        ax = _Axes(t0, t1, -lim, lim, top, panel - 10)
        tt, xx = _decimate(t, x)
        body.append(_polyline(ax.x(tt), ax.y(xx), "#333333", 0.8))
        body.append(_text(MARGIN, top - 2, f"{name} (mV, peak {lim:.2g})"))
    ax = _Axes(t0, t1, 0, 1)
    for ev in events:
        if ev.get("type") != "therapy":
            continue
        colour = THERAPY_COLOURS.get(ev.get("kind"), "#000000")
        times = ev.get("pulses") or [ev.get("onset_ms", ev["t_ms"])]
        for p in times:
            xp = float(ax.x(p / 1000.0))
            body.append(f'<line x1="{xp:.1f}" x2="{xp:.1f}" y1="{MARGIN}" y2="{HEIGHT - MARGIN}" '
                        f'stroke="{colour}" stroke-width="0.8" stroke-opacity="0.7"/>')
        xp = float(ax.x(times[0] / 1000.0))
        body.append(_text(xp + 2, MARGIN - 14, ev.get("kind", ""), 10))
    body.append(_text(WIDTH / 2, HEIGHT - 12, "time (s)", anchor="middle"))
    body.append(_text(MARGIN, HEIGHT - 12, f"{t0:.1f}"))
    body.append(_text(WIDTH - MARGIN, HEIGHT - 12, f"{t1:.1f}", anchor="end"))
    return _doc(body)


def periods_svg(events, detection):
    """Sensed ventricular periods over time on top of the zone threshold bands."""
    sense = [(e["t_ms"] / 1000.0, e["period_ms"]) for e in events if e.get("type") == "sense" and "period_ms" in e]
    t = np.array([s[0] for s in sense])
    p = np.array([s[1] for s in sense])
    th = detection.th
    y_max = max(float(p.max()) if p.size else 0.0, th[ZoneId.VT1]) * 1.1
    t_end = max([e["t_ms"] for e in events] + [1.0]) / 1000.0
    ax = _Axes(0.0, t_end, 0.0, y_max)
    body = []
    bands = [(ZoneId.VF, 0.0, th[ZoneId.VF]), (ZoneId.VF1, th[ZoneId.VF], th[ZoneId.VF1]),
             (ZoneId.VT, th[ZoneId.VF1], th[ZoneId.VT]), (ZoneId.VT1, th[ZoneId.VT], th[ZoneId.VT1])]
    for z, lo, hi in bands:
        y_top, y_bot = float(ax.y(hi)), float(ax.y(lo))
        body.append(f'<rect x="{MARGIN}" y="{y_top:.1f}" width="{WIDTH - 2 * MARGIN}" height="{y_bot - y_top:.1f}" '
                    f'fill="{ZONE_COLOURS[z]}"/>')
        body.append(_text(WIDTH - MARGIN + 4, (y_top + y_bot) / 2 + 4, z.name, 10))
    if t.size:
        body.append(_polyline(ax.x(t), ax.y(p), "#1f3b73", 1.0))
        for x, y in zip(ax.x(t), ax.y(p)):
            body.append(f'<circle cx="{x:.1f}" cy="{y:.1f}" r="1.8" fill="#1f3b73"/>')
    for ev in events:
        if ev.get("type") == "therapy":
            xp = float(ax.x(ev["t_ms"] / 1000.0))
            colour = THERAPY_COLOURS.get(ev.get("kind"), "#000000")
            body.append(f'<line x1="{xp:.1f}" x2="{xp:.1f}" y1="{MARGIN}" y2="{HEIGHT - MARGIN}" '
                        f'stroke="{colour}" stroke-dasharray="4,3"/>')
            body.append(_text(xp + 2, MARGIN - 4, ev.get("kind", ""), 10))
    body.append(_text(MARGIN, MARGIN - 20, "ventricular period (ms)"))
    body.append(_text(MARGIN - 4, float(ax.y(0)) + 4, "0", 10, "end"))
    body.append(_text(MARGIN - 4, float(ax.y(y_max)) + 4, f"{y_max:.0f}", 10, "end"))
    body.append(_text(WIDTH / 2, HEIGHT - 12, "time (s)", anchor="middle"))
    return _doc(body)
