"""Minimal static SVG charts: polyline overlays, histograms and bar charts."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")
_MARGIN = (70, 20, 40, 50)  # left, right, top, bottom


def decimate(x, y, max_points: int = 2000) -> tuple[np.ndarray, np.ndarray]:
    """Keep the min and max of each bucket so spikes survive downsampling."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.size <= max_points:
        return x, y
    buckets = max_points // 2
    edges = np.linspace(0, x.size, buckets + 1).astype(int)
    keep = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if hi <= lo:
            continue
        seg = y[lo:hi]
        a, b = lo + int(np.argmin(seg)), lo + int(np.argmax(seg))
        keep.extend(sorted({a, b}))
    idx = np.array(keep)
    return x[idx], y[idx]


class _Frame:
    def __init__(self, width: int, height: int, xlim, ylim) -> None:
        self.w, self.h = width, height
        left, right, top, bottom = _MARGIN
        self.x0, self.x1 = left, width - right
        self.y0, self.y1 = height - bottom, top
        lo, hi = float(xlim[0]), float(xlim[1])
        self.xlim = (lo, hi if hi > lo else lo + 1.0)
        lo, hi = float(ylim[0]), float(ylim[1])
        if not hi > lo:
            pad = abs(lo) * 0.05 or 1.0
            lo, hi = lo - pad, hi + pad
        self.ylim = (lo, hi)

    def px(self, x):
        a, b = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - a) / (b - a) * (self.x1 - self.x0)

    def py(self, y):
        a, b = self.ylim
        return self.y0 - (np.asarray(y, dtype=float) - a) / (b - a) * (self.y0 - self.y1)

    def axes(self, title: str, xlabel: str, ylabel: str) -> list[str]:
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.w}" height="{self.h}" '
            f'viewBox="0 0 {self.w} {self.h}" font-family="sans-serif" font-size="11">',
            f'<rect width="{self.w}" height="{self.h}" fill="white"/>',
            f'<text x="{self.w / 2:.1f}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
            f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x1}" y2="{self.y0}" stroke="black"/>',
            f'<line x1="{self.x0}" y1="{self.y0}" x2="{self.x0}" y2="{self.y1}" stroke="black"/>',
        ]
        for v in np.linspace(*self.xlim, 6):
            x = float(self.px(v))
            out.append(f'<line x1="{x:.1f}" y1="{self.y0}" x2="{x:.1f}" y2="{self.y0 + 4}" stroke="black"/>')
            out.append(f'<text x="{x:.1f}" y="{self.y0 + 16}" text-anchor="middle">{v:.4g}</text>')
        for v in np.linspace(*self.ylim, 6):
            y = float(self.py(v))
            out.append(f'<line x1="{self.x0 - 4}" y1="{y:.1f}" x2="{self.x0}" y2="{y:.1f}" stroke="black"/>')
            out.append(f'<text x="{self.x0 - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.6g}</text>')
        out.append(f'<text x="{(self.x0 + self.x1) / 2:.1f}" y="{self.h - 8}" text-anchor="middle">'
                   f'{escape(xlabel)}</text>')
        out.append(f'<text x="14" y="{(self.y0 + self.y1) / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 14 {(self.y0 + self.y1) / 2:.1f})">{escape(ylabel)}</text>')
        return out


def line_plot(series, title: str = "", xlabel: str = "", ylabel: str = "", width: int = 800,
              height: int = 400, max_points: int = 2000) -> str:
    """``series`` is a list of ``(label, x, y)``."""
    prepared = [(label, *decimate(x, y, max_points)) for label, x, y in series]
    xs = [s[1] for s in prepared if s[1].size]
    ys = [s[2] for s in prepared if s[2].size]
    xlim = (min(a.min() for a in xs), max(a.max() for a in xs)) if xs else (0, 1)
    ylim = (min(a.min() for a in ys), max(a.max() for a in ys)) if ys else (0, 1)
    fr = _Frame(width, height, xlim, ylim)
    out = fr.axes(title, xlabel, ylabel)
    for i, (label, x, y) in enumerate(prepared):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{a:.1f},{b:.1f}" for a, b in zip(fr.px(x), fr.py(y)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1" points="{pts}"/>')
        ly = fr.y1 + 14 * (i + 1)
        out.append(f'<line x1="{fr.x1 - 150}" y1="{ly - 4}" x2="{fr.x1 - 130}" y2="{ly - 4}" stroke="{color}"/>')
        out.append(f'<text x="{fr.x1 - 125}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def histogram(edges, counts, title: str = "", xlabel: str = "", ylabel: str = "count", width: int = 800,
              height: int = 400) -> str:
    edges = np.asarray(edges, dtype=float)
    counts = np.asarray(counts, dtype=float)
    fr = _Frame(width, height, (edges[0], edges[-1]), (0, max(1.0, counts.max() if counts.size else 1.0)))
    out = fr.axes(title, xlabel, ylabel)
    for lo, hi, c in zip(edges[:-1], edges[1:], counts):
        x0, x1 = float(fr.px(lo)), float(fr.px(hi))
        y = float(fr.py(c))
        out.append(f'<rect x="{x0:.1f}" y="{y:.1f}" width="{max(0.5, x1 - x0 - 1):.1f}" '
                   f'height="{fr.y0 - y:.1f}" fill="{PALETTE[0]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def bar_chart(labels, values, title: str = "", ylabel: str = "", width: int = 800, height: int = 400) -> str:
    values = np.asarray(values, dtype=float)
    n = len(labels)
    fr = _Frame(width, height, (0, max(n, 1)), (0, max(1e-12, values.max() if n else 1.0)))
    out = fr.axes(title, "", ylabel)
    for i, (label, v) in enumerate(zip(labels, values)):
        x0, x1 = float(fr.px(i + 0.15)), float(fr.px(i + 0.85))
        y = float(fr.py(v))
        out.append(f'<rect x="{x0:.1f}" y="{y:.1f}" width="{x1 - x0:.1f}" height="{fr.y0 - y:.1f}" '
                   f'fill="{PALETTE[i % len(PALETTE)]}"/>')
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{y - 3:.1f}" text-anchor="middle">{v:.4g}</text>')
        out.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{fr.y0 + 28}" text-anchor="middle" '
                   f'font-size="9">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
