"""Dependency-free SVG figures: loss curves and category heatmaps.

Output is a pure function of the input numbers (no timestamps), so reruns
produce byte-identical files.
"""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .evaluation import CATEGORY_WIDTH, Heatmap


def _svg(width: int, height: int, body: list[str]) -> str:
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">\n'
        + "\n".join(body)
        + "\n</svg>\n"
    )


def loss_curve_svg(curves: dict[str, Sequence[float]], title: str = "training loss", log_scale: bool = True) -> str:
    """Mean training loss per epoch, one polyline per run plus their mean."""
    width, height, pad = 640, 400, 56
    series = {k: list(v) for k, v in curves.items() if len(v)}
    if len(series) > 1:
        n = min(len(v) for v in series.values())
        series["mean"] = [sum(v[i] for v in curves.values()) / len(curves) for i in range(n)]
    values = [x for v in series.values() for x in v if x > 0 or not log_scale]
    body = [f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    if not values:
        body.append(f'<text x="{width / 2}" y="{height / 2}" text-anchor="middle">no data</text>')
        return _svg(width, height, body)
    f = (lambda y: math.log10(y)) if log_scale else (lambda y: y)
    lo, hi = f(min(values)), f(max(values))
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    epochs = max(len(v) for v in series.values())
    x_of = lambda i: pad + (width - 2 * pad) * (i / max(epochs - 1, 1))
    y_of = lambda y: height - pad - (height - 2 * pad) * ((f(y) - lo) / (hi - lo))
    body.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
    body.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
    body.append(f'<text x="{width / 2}" y="{height - 16}" text-anchor="middle">epoch</text>')
    label = "mean loss (log10)" if log_scale else "mean loss"
    body.append(f'<text x="16" y="{height / 2}" transform="rotate(-90 16 {height / 2})" text-anchor="middle">{label}</text>')
    for t in range(5):
        v = lo + (hi - lo) * t / 4
        y = height - pad - (height - 2 * pad) * t / 4
        shown = 10**v if log_scale else v
        body.append(f'<text x="{pad - 4}" y="{y + 4:.1f}" text-anchor="end">{shown:.3g}</text>')
    palette = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"]
    for k, (name, ys) in enumerate(series.items()):
        pts = " ".join(f"{x_of(i):.2f},{y_of(y):.2f}" for i, y in enumerate(ys) if y > 0 or not log_scale)
        color = "black" if name == "mean" else palette[k % len(palette)]
        w = 2.5 if name == "mean" else 1.2
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="{w}" points="{pts}"/>')
        body.append(f'<text x="{width - pad + 4}" y="{pad + 14 * k}" fill="{color}">{escape(name)}</text>')
    return _svg(width, height, body)


def _cell_color(pct: float) -> str:
    t = max(0.0, min(1.0, pct / 100.0))
    r = int(round(255 - 225 * t))
    g = int(round(255 - 140 * t))
    b = int(round(255 - 40 * t))
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(heat: Heatmap, title: str = "category heatmap") -> str:
    """Rows are true categories, columns predicted; cells show row percentages."""
    n = len(heat.bins)
    cell = 34
    left, top = 70, 50
    width = left + n * cell + 20
    height = top + n * cell + 50
    body = [f'<rect width="{width}" height="{height}" fill="white"/>',
            f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
            f'<text x="{left + n * cell / 2}" y="{height - 10}" text-anchor="middle">predicted category (deg)</text>',
            f'<text x="14" y="{top + n * cell / 2}" transform="rotate(-90 14 {top + n * cell / 2})" '
            f'text-anchor="middle">true category (deg)</text>']
    for i, tb in enumerate(heat.bins):
        y = top + i * cell
        body.append(f'<text x="{left - 4}" y="{y + cell / 2 + 4}" text-anchor="end">{int(tb * CATEGORY_WIDTH)}</text>')
        for j, _ in enumerate(heat.bins):
            x = left + j * cell
            v = float(heat.matrix[i][j])
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_cell_color(v)}" stroke="#ccc"/>')
            if v > 0:
                body.append(f'<text x="{x + cell / 2}" y="{y + cell / 2 + 4}" text-anchor="middle" font-size="9">{v:.0f}</text>')
    for j, pb in enumerate(heat.bins):
        x = left + j * cell + cell / 2
        body.append(f'<text x="{x}" y="{top + n * cell + 14}" text-anchor="middle">{int(pb * CATEGORY_WIDTH)}</text>')
    return _svg(width, height, body)


def write_svg(svg: str, path) -> Path:
    path = Path(path)
    path.write_text(svg)
    return path
