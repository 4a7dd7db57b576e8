"""Minimal pure-text SVG renderer for loss curves and weight histograms.

No external renderer: the functions emit a complete SVG document with
polylines/rects and fixed-precision coordinates, so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_W, _H = 640, 400
_MARGIN = 50


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _header(title: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:.0f}" y="20" text-anchor="middle" '
        f'font-family="monospace" font-size="14">{title}</text>',
    ]


def _axes(x0, y0, x1, y1) -> str:
    return (
        f'<polyline points="{_fmt(x0)},{_fmt(y0)} {_fmt(x0)},{_fmt(y1)} '
        f'{_fmt(x1)},{_fmt(y1)}" fill="none" stroke="black" stroke-width="1"/>'
    )


def line_plot(series: dict[str, list[float]], path, title: str = "") -> None:
    """One polyline per named series, indexed by position on the x axis."""
    finite = {
        name: [v for v in values if np.isfinite(v)] for name, values in series.items()
    }
    all_vals = [v for vals in finite.values() for v in vals]
    if not all_vals:
        raise ValueError("nothing to plot")
    lo, hi = min(all_vals), max(all_vals)
    if hi == lo:
        hi = lo + 1.0
    n = max(len(v) for v in series.values())
    x0, y0, x1, y1 = _MARGIN, 30, _W - 20, _H - _MARGIN

    def sx(i):
        return x0 + (x1 - x0) * (i / max(n - 1, 1))

    def sy(v):
        return y1 - (y1 - y0) * ((v - lo) / (hi - lo))

    parts = _header(title)
    parts.append(_axes(x0, y0, x1, y1))
    parts.append(
        f'<text x="{_fmt(x0)}" y="{_fmt(y1 + 18)}" font-family="monospace" '
        f'font-size="11">0</text>'
        f'<text x="{_fmt(x1)}" y="{_fmt(y1 + 18)}" text-anchor="end" '
        f'font-family="monospace" font-size="11">{n - 1}</text>'
        f'<text x="{_fmt(x0 - 4)}" y="{_fmt(y1)}" text-anchor="end" '
        f'font-family="monospace" font-size="11">{lo:.4g}</text>'
        f'<text x="{_fmt(x0 - 4)}" y="38" text-anchor="end" '
        f'font-family="monospace" font-size="11">{hi:.4g}</text>'
    )
    for k, (name, values) in enumerate(sorted(series.items())):
        color = _COLORS[k % len(_COLORS)]
        points = " ".join(
            f"{_fmt(sx(i))},{_fmt(sy(v))}"
            for i, v in enumerate(values)
            if np.isfinite(v)
        )
        if points:
            parts.append(
                f'<polyline points="{points}" fill="none" stroke="{color}" '
                f'stroke-width="1.5"/>'
            )
        parts.append(
            f'<text x="{_fmt(x1 - 120)}" y="{_fmt(40 + 14 * k)}" '
            f'font-family="monospace" font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def histogram(values, path, bins: int = 20, title: str = "") -> None:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("nothing to plot")
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    peak = max(int(counts.max()), 1)
    x0, y0, x1, y1 = _MARGIN, 30, _W - 20, _H - _MARGIN
    parts = _header(title)
    parts.append(_axes(x0, y0, x1, y1))
    width = (x1 - x0) / bins
    for i, count in enumerate(counts):
        h = (y1 - y0) * (count / peak)
        parts.append(
            f'<rect x="{_fmt(x0 + i * width)}" y="{_fmt(y1 - h)}" '
            f'width="{_fmt(width * 0.9)}" height="{_fmt(h)}" fill="#1f77b4"/>'
        )
    parts.append(
        f'<text x="{_fmt(x0)}" y="{_fmt(y1 + 18)}" font-family="monospace" '
        f'font-size="11">{edges[0]:.2f}</text>'
        f'<text x="{_fmt(x1)}" y="{_fmt(y1 + 18)}" text-anchor="end" '
        f'font-family="monospace" font-size="11">{edges[-1]:.2f}</text>'
        f'<text x="{_fmt(x0 - 4)}" y="38" text-anchor="end" '
        f'font-family="monospace" font-size="11">{peak}</text>'
    )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
