"""Minimal static SVG line plots (deterministic output, no plotting backend)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 320
MARGIN = dict(left=64, right=16, top=28, bottom=44)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#7f7f7f"]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
              logy: bool = False, logx: bool = False, dashed=()) -> str:
    """Render named (x, y) series as an SVG document.

    Non-positive values are dropped on log axes.
    """
    pts = {}
    for name, (x, y) in series.items():
        x, y = np.asarray(x, float), np.asarray(y, float)
        keep = np.isfinite(x) & np.isfinite(y)
        if logy:
            keep &= y > 0
        if logx:
            keep &= x > 0
        pts[name] = (x[keep], y[keep])
    tx = np.log10 if logx else (lambda v: v)
    ty = np.log10 if logy else (lambda v: v)
    allx = np.concatenate([tx(x) for x, _ in pts.values()] or [np.zeros(1)])
    ally = np.concatenate([ty(y) for _, y in pts.values()] or [np.zeros(1)])
    if allx.size == 0:
        allx = np.zeros(1)
    if ally.size == 0:
        ally = np.zeros(1)
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = float(ally.min()), float(ally.max())
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def py(v):
        return MARGIN["top"] + (1 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
           'fill="none" stroke="black"/>']
    for i in range(5):
        fx = x0 + (x1 - x0) * i / 4
        fy = y0 + (y1 - y0) * i / 4
        lx = 10**fx if logx else fx
        ly = 10**fy if logy else fy
        out.append(f'<text x="{px(fx):.1f}" y="{HEIGHT - MARGIN["bottom"] + 14}" '
                   f'text-anchor="middle">{_fmt(lx)}</text>')
        out.append(f'<text x="{MARGIN["left"] - 4}" y="{py(fy) + 4:.1f}" '
                   f'text-anchor="end">{_fmt(ly)}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="16" text-anchor="middle">{escape(title)}</text>')
    out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>')
    for k, (name, (x, y)) in enumerate(pts.items()):
        color = COLORS[k % len(COLORS)]
        if x.size:
            path = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(tx(x), ty(y)))
            dash = ' stroke-dasharray="5,3"' if name in dashed else ""
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"{dash}/>')
        ly = MARGIN["top"] + 14 + 14 * k
        out.append(f'<text x="{WIDTH - MARGIN["right"] - 6}" y="{ly}" text-anchor="end" '
                   f'fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
