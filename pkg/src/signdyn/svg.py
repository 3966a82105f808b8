"""Minimal line charts as standalone SVG (stacked panels, shared x axis)."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _panel(series: dict, x, top: float, width: float, height: float, title: str) -> list:
    left, right = 60.0, 15.0
    w = width - left - right
    vals = np.concatenate([np.asarray(v, dtype=float)[np.isfinite(v)] for v in series.values()] or [[0.0]])
    lo, hi = (float(vals.min()), float(vals.max())) if vals.size else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    x = np.asarray(x, dtype=float)
    x0, x1 = float(x.min()), float(x.max()) if x.max() > x.min() else float(x.min()) + 1.0

    def px(xv):
        return left + (xv - x0) / (x1 - x0) * w

    def py(yv):
        return top + height - (yv - lo) / (hi - lo) * height

    out = [f'<rect x="{left}" y="{top}" width="{w}" height="{height}" fill="none" stroke="#999"/>',
           f'<text x="{left}" y="{top - 4}" font-size="11">{escape(title)}</text>',
           f'<text x="4" y="{top + 10}" font-size="9">{hi:.4g}</text>',
           f'<text x="4" y="{top + height}" font-size="9">{lo:.4g}</text>']
    for k, (name, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=float)
        xs = x[: len(ys)]
        ok = np.isfinite(ys)
        pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(xs[ok], ys[ok]))
        col = PALETTE[k % len(PALETTE)]
        dash = ' stroke-dasharray="4 3"' if "ref" in name else ""
        out.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.2"{dash}/>')
        out.append(f'<text x="{left + w - 120}" y="{top + 12 + 11 * k}" font-size="9" fill="{col}">'
                   f'{escape(name)}</text>')
    return out


def line_chart(panels: list, x, path, width: int = 640, panel_height: int = 140) -> None:
    """``panels`` is a list of ``(title, {label: values})``; writes an SVG file."""
    gap = 30
    height = len(panels) * (panel_height + gap) + gap
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif">']
    for i, (title, series) in enumerate(panels):
        parts += _panel(series, x, gap + i * (panel_height + gap), width, panel_height, title)
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
