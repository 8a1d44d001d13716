"""Static SVG line plots and heatmaps without external plotting libraries."""

from __future__ import annotations

import json
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import ArgumentError

WIDTH, HEIGHT = 720, 400
MARGIN = {"left": 70, "right": 150, "top": 40, "bottom": 50}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    return np.linspace(lo, hi, count)


def _header(title, config):
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" '
             f'width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="11">']
    parts.append(f"<metadata>{escape(json.dumps(config or {}, sort_keys=True, default=str))}</metadata>")
    parts.append(f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
    if title:
        parts.append(f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    return parts


def line_plot(series: dict, title: str = "", xlabel: str = "step", ylabel: str = "",
              config: dict | None = None) -> str:
    """One polyline per named series; axes, ticks and legend use other elements."""
    if not series or any(len(np.atleast_1d(v)) == 0 for v in series.values()):
        raise ArgumentError("line plot needs at least one non-empty series")
    arrays = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in series.items()}
    n = max(len(a) for a in arrays.values())
    lo = min(float(a.min()) for a in arrays.values())
    hi = max(float(a.max()) for a in arrays.values())
    pad = 0.05 * (hi - lo) if hi > lo else 1.0
    lo, hi = lo - pad, hi + pad
    x0, x1 = MARGIN["left"], WIDTH - MARGIN["right"]
    y0, y1 = HEIGHT - MARGIN["bottom"], MARGIN["top"]

    def sx(i):
        return x0 + (x1 - x0) * (i / max(n - 1, 1))

    def sy(v):
        return y0 + (y1 - y0) * (v - lo) / (hi - lo)

    parts = _header(title, config)
    parts.append(f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    parts.append(f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for v in _ticks(lo, hi):
        y = sy(v)
        parts.append(f'<line class="tick" x1="{x0 - 4}" y1="{y:.2f}" x2="{x0}" y2="{y:.2f}" stroke="black"/>')
        parts.append(f'<text x="{x0 - 6}" y="{y + 4:.2f}" text-anchor="end">{_fmt(v)}</text>')
    for i in sorted(set(np.linspace(0, n - 1, min(n, 7)).round().astype(int))):
        x = sx(i)
        parts.append(f'<line class="tick" x1="{x:.2f}" y1="{y0}" x2="{x:.2f}" y2="{y0 + 4}" stroke="black"/>')
        parts.append(f'<text x="{x:.2f}" y="{y0 + 16}" text-anchor="middle">{i + 1}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    if ylabel:
        parts.append(f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 16 {(y0 + y1) / 2})">{escape(ylabel)}</text>')
    for idx, (name, arr) in enumerate(arrays.items()):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(arr))
        parts.append(f'<polyline class="series" points="{pts}" fill="none" stroke="{color}" stroke-width="2">'
                     f"<title>{escape(str(name))}</title></polyline>")
        ly = MARGIN["top"] + 18 * idx
        parts.append(f'<line class="legend" x1="{x1 + 12}" y1="{ly}" x2="{x1 + 32}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{x1 + 36}" y="{ly + 4}">{escape(str(name))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _shade(u: float) -> str:
    """Light (u=0) to dark (u=1) blue, monotone in every channel."""
    light, dark = np.array([247, 251, 255]), np.array([8, 48, 107])
    r, g, b = np.round(light + (dark - light) * min(max(u, 0.0), 1.0)).astype(int)
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(values, row_labels=None, title: str = "", xlabel: str = "time step",
            config: dict | None = None) -> str:
    """Grid of ``rect.cell`` elements, one per matrix entry."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.size == 0:
        raise ArgumentError("heatmap needs a non-empty 2D matrix")
    rows, cols = values.shape
    row_labels = list(row_labels) if row_labels is not None else [str(i + 1) for i in range(rows)]
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo if hi > lo else 1.0
    x0, x1 = MARGIN["left"] + 30, WIDTH - MARGIN["right"]
    y0, y1 = MARGIN["top"], HEIGHT - MARGIN["bottom"]
    cw, ch = (x1 - x0) / cols, (y1 - y0) / rows
    parts = _header(title, config)
    for i in range(rows):
        for j in range(cols):
            v = values[i, j]
            parts.append(f'<rect class="cell" x="{x0 + j * cw:.2f}" y="{y0 + i * ch:.2f}" width="{cw:.2f}" '
                         f'height="{ch:.2f}" fill="{_shade((v - lo) / span)}"><title>{_fmt(v)}</title></rect>')
        parts.append(f'<text x="{x0 - 6}" y="{y0 + (i + 0.5) * ch + 4:.2f}" text-anchor="end">'
                     f"{escape(row_labels[i])}</text>")
    for j in sorted(set(np.linspace(0, cols - 1, min(cols, 8)).round().astype(int))):
        parts.append(f'<text x="{x0 + (j + 0.5) * cw:.2f}" y="{y1 + 16}" text-anchor="middle">{j + 1}</text>')
    parts.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
    # colour bar legend
    for s in range(10):
        parts.append(f'<rect class="legend" x="{x1 + 20}" y="{y0 + s * 20}" width="16" height="20" '
                     f'fill="{_shade(1 - s / 9)}"/>')
    parts.append(f'<text x="{x1 + 42}" y="{y0 + 12}">{_fmt(hi)}</text>')
    parts.append(f'<text x="{x1 + 42}" y="{y0 + 200}">{_fmt(lo)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_plot(series, kind: str, path, title: str = "", config: dict | None = None, **kw) -> Path:
    """Write a line plot (``series`` is a name -> values dict) or heatmap (a matrix) to ``path``."""
    if kind == "line":
        text = line_plot(series, title, config=config, **kw)
    elif kind == "heatmap":
        text = heatmap(series, title=title, config=config, **kw)
    else:
        raise ArgumentError(f"unknown plot kind {kind!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
