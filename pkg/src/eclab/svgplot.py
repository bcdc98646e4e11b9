"""Minimal dependency-free SVG line charts.

Produces deterministic markup (fixed float formatting, no timestamps) so
repeated report runs are byte-identical. Each series is a polyline with an
optional translucent min/max band behind it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

# default palette follows the usual matplotlib cycle so strategy colors look
# familiar: learned=red, left-branching=blue, random-branching=orange
PALETTE = ["#d62728", "#1f77b4", "#ff7f0e", "#2ca02c", "#9467bd", "#8c564b"]


@dataclass
class Series:
    label: str
    xs: list
    ys: list
    color: str = "#1f77b4"
    band_lo: list | None = None
    band_hi: list | None = None


def _fmt(v):
    return f"{v:.6g}"


def nice_ticks(lo, hi, target=5):
    """Round tick positions covering [lo, hi] with a 1-2-5 step."""
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise ValueError(f"cannot tick non-finite range [{lo}, {hi}]")
    if hi < lo:
        lo, hi = hi, lo
    if hi == lo:
        pad = abs(lo) * 0.1 or 1.0
        lo, hi = lo - pad, hi + pad
    raw = (hi - lo) / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1.0, 2.0, 5.0, 10.0) if raw <= m * mag + 1e-12)
    first = math.ceil(lo / step - 1e-9) * step
    ticks = []
    t = first
    while t <= hi + step * 1e-9:
        ticks.append(0.0 if abs(t) < step * 1e-9 else t)
        t += step
    return ticks


def line_chart(series, title="", xlabel="", ylabel="", width=640, height=420):
    """Render series to an SVG string."""
    series = list(series)
    if not series:
        raise ValueError("no series to plot")
    xs_all = [x for s in series for x in s.xs]
    ys_all = [y for s in series for y in s.ys if math.isfinite(y)]
    for s in series:
        if len(s.xs) != len(s.ys):
            raise ValueError(f"series {s.label!r} has mismatched xs/ys")
        if s.band_lo is not None:
            ys_all += [y for y in s.band_lo if math.isfinite(y)]
            ys_all += [y for y in s.band_hi if math.isfinite(y)]
    if not xs_all or not ys_all:
        raise ValueError("nothing finite to plot")
    x_ticks = nice_ticks(min(xs_all), max(xs_all))
    y_ticks = nice_ticks(min(ys_all), max(ys_all))
    x0, x1 = min(min(xs_all), x_ticks[0]), max(max(xs_all), x_ticks[-1])
    y0, y1 = min(min(ys_all), y_ticks[0]), max(max(ys_all), y_ticks[-1])
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    left, right, top, bottom = 62, 16, 34, 46
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (y1 - y) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(
            f'<text x="{width / 2:.6g}" y="20" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{_esc(title)}</text>'
        )
    for t in x_ticks:
        x = px(t)
        out.append(
            f'<line x1="{x:.2f}" y1="{top}" x2="{x:.2f}" y2="{top + ph}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{x:.2f}" y="{top + ph + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
    for t in y_ticks:
        y = py(t)
        out.append(
            f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        out.append(
            f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
    out.append(
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" '
        f'stroke="#333333" stroke-width="1"/>'
    )
    if xlabel:
        out.append(
            f'<text x="{left + pw / 2:.6g}" y="{height - 10}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{_esc(xlabel)}</text>'
        )
    if ylabel:
        out.append(
            f'<text x="16" y="{top + ph / 2:.6g}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {top + ph / 2:.6g})">{_esc(ylabel)}</text>'
        )
    for s in series:
        if s.band_lo is not None:
            pts = [f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.xs, s.band_hi)]
            pts += [
                f"{px(x):.2f},{py(y):.2f}"
                for x, y in zip(reversed(s.xs), reversed(s.band_lo))
            ]
            out.append(
                f'<polygon points="{" ".join(pts)}" fill="{s.color}" '
                f'fill-opacity="0.15" stroke="none"/>'
            )
    for s in series:
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(s.xs, s.ys))
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{s.color}" '
            f'stroke-width="1.8"/>'
        )
    for i, s in enumerate(series):
        ly = top + 8 + 16 * i
        lx = left + pw - 150
        out.append(
            f'<line x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" '
            f'stroke="{s.color}" stroke-width="2"/>'
        )
        out.append(
            f'<text x="{lx + 28}" y="{ly + 4}" font-family="sans-serif" '
            f'font-size="11">{_esc(s.label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out)


def _esc(text):
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
    )
