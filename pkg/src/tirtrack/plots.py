"""Minimal SVG line plots, so reports need no plotting dependency."""
from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 480, 320
PAD_L, PAD_R, PAD_T, PAD_B = 60, 20, 20, 50


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_plot_svg(xs: Sequence[float], ys: Sequence[float], xlabel: str, ylabel: str,
                  categorical_x: bool = True) -> str:
    """One polyline with markers. With ``categorical_x`` points are evenly spaced."""
    if len(xs) != len(ys) or not xs:
        raise ValueError("xs and ys must be non-empty and of equal length")
    finite = [y for y in ys if math.isfinite(y)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pw, ph = WIDTH - PAD_L - PAD_R, HEIGHT - PAD_T - PAD_B
    n = len(xs)
    if categorical_x:
        px = [PAD_L + (pw * i / (n - 1) if n > 1 else pw / 2) for i in range(n)]
    else:
        x0, x1 = min(xs), max(xs)
        span = (x1 - x0) or 1.0
        px = [PAD_L + pw * (x - x0) / span for x in xs]

    def sy(y: float) -> float:
        return PAD_T + ph * (1 - (y - lo) / (hi - lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
             f'<line x1="{PAD_L}" y1="{PAD_T + ph}" x2="{PAD_L + pw}" y2="{PAD_T + ph}" stroke="black"/>',
             f'<line x1="{PAD_L}" y1="{PAD_T}" x2="{PAD_L}" y2="{PAD_T + ph}" stroke="black"/>']
    for t in _ticks(lo, hi):
        y = sy(t)
        parts.append(f'<line x1="{PAD_L - 4}" y1="{y:.1f}" x2="{PAD_L}" y2="{y:.1f}" stroke="black"/>')
        parts.append(f'<text x="{PAD_L - 6}" y="{y + 4:.1f}" text-anchor="end">{t:.3f}</text>')
    for x, p in zip(xs, px):
        parts.append(f'<text x="{p:.1f}" y="{PAD_T + ph + 16}" text-anchor="middle">{escape(str(x))}</text>')
    pts = [(p, sy(y)) for p, y in zip(px, ys) if math.isfinite(y)]
    if pts:
        parts.append('<polyline fill="none" stroke="#1f77b4" stroke-width="2" points="'
                     + " ".join(f"{a:.1f},{b:.1f}" for a, b in pts) + '"/>')
        parts.extend(f'<circle cx="{a:.1f}" cy="{b:.1f}" r="3" fill="#1f77b4"/>' for a, b in pts)
    parts.append(f'<text x="{PAD_L + pw / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text x="14" y="{PAD_T + ph / 2}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {PAD_T + ph / 2})">{escape(ylabel)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
