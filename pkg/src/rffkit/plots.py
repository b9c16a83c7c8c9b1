"""Minimal self-contained SVG figures. CSV files stay the source of truth."""
from __future__ import annotations

from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

W, H = 480, 360
PAD_L, PAD_R, PAD_T, PAD_B = 56, 16, 32, 44
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def _range(v) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    span = hi - lo
    return lo - 0.05 * span, hi + 0.05 * span


class _Canvas:
    def __init__(self, title: str, xlabel: str = "", ylabel: str = ""):
        self.items = [
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        ]
        if xlabel:
            self.items.append(f'<text x="{(PAD_L + W - PAD_R) / 2}" y="{H - 8}" '
                              f'text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
        if ylabel:
            self.items.append(f'<text x="14" y="{(PAD_T + H - PAD_B) / 2}" font-size="12" '
                              f'text-anchor="middle" transform="rotate(-90 14 {(PAD_T + H - PAD_B) / 2})">'
                              f'{escape(ylabel)}</text>')

    def axes(self, xr, yr, xticks=None):
        self.xr, self.yr = xr, yr
        x0, x1, y0, y1 = PAD_L, W - PAD_R, H - PAD_B, PAD_T
        self.items.append(f'<rect x="{x0}" y="{y1}" width="{x1 - x0}" height="{y0 - y1}" '
                          f'fill="none" stroke="black"/>')
        for t in (xticks if xticks is not None else np.linspace(*xr, 5)):
            px = self.px(t)
            self.items.append(f'<line x1="{px:.1f}" y1="{y0}" x2="{px:.1f}" y2="{y0 + 4}" stroke="black"/>')
            self.items.append(f'<text x="{px:.1f}" y="{y0 + 16}" text-anchor="middle" '
                              f'font-size="10">{_fmt(t)}</text>')
        for t in np.linspace(*yr, 5):
            py = self.py(t)
            self.items.append(f'<line x1="{x0 - 4}" y1="{py:.1f}" x2="{x0}" y2="{py:.1f}" stroke="black"/>')
            self.items.append(f'<text x="{x0 - 6}" y="{py + 3:.1f}" text-anchor="end" '
                              f'font-size="10">{_fmt(t)}</text>')

    def px(self, x):
        lo, hi = self.xr
        return PAD_L + (x - lo) / (hi - lo) * (W - PAD_L - PAD_R)

    def py(self, y):
        lo, hi = self.yr
        return H - PAD_B - (y - lo) / (hi - lo) * (H - PAD_T - PAD_B)

    def legend(self, names: Sequence[str]):
        for i, name in enumerate(names):
            y = PAD_T + 12 + 14 * i
            c = PALETTE[i % len(PALETTE)]
            self.items.append(f'<rect x="{W - PAD_R - 90}" y="{y - 8}" width="8" height="8" fill="{c}"/>')
            self.items.append(f'<text x="{W - PAD_R - 78}" y="{y}" font-size="10">{escape(str(name))}</text>')

    def save(self, path) -> None:
        body = "\n".join(self.items)
        Path(path).write_text(f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
                              f'viewBox="0 0 {W} {H}">\n{body}\n</svg>\n')


def scatter(path, points, labels, title: str = "", xlabel: str = "PC1", ylabel: str = "PC2") -> None:
    """2-D scatter coloured by label."""
    points = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels)
    c = _Canvas(title, xlabel, ylabel)
    c.axes(_range(points[:, 0]), _range(points[:, 1]))
    classes = list(np.unique(labels))
    for (x, y), lab in zip(points, labels):
        col = PALETTE[classes.index(lab) % len(PALETTE)]
        c.items.append(f'<circle cx="{c.px(x):.1f}" cy="{c.py(y):.1f}" r="2" fill="{col}" fill-opacity="0.7"/>')
    c.legend([str(k) for k in classes])
    c.save(path)


def lines(path, x, series: dict[str, Sequence[float]], title: str = "", xlabel: str = "",
          ylabel: str = "") -> None:
    """One polyline with markers per named series over a shared x axis."""
    x = np.asarray(x, dtype=np.float64)
    allv = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    c = _Canvas(title, xlabel, ylabel)
    c.axes(_range(x), _range(allv), xticks=x if x.size <= 10 else None)
    for i, (name, ys) in enumerate(series.items()):
        col = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{c.px(a):.1f},{c.py(b):.1f}" for a, b in zip(x, ys) if np.isfinite(b))
        c.items.append(f'<polyline points="{pts}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        for a, b in zip(x, ys):
            if np.isfinite(b):
                c.items.append(f'<circle cx="{c.px(a):.1f}" cy="{c.py(b):.1f}" r="2.5" fill="{col}"/>')
    if len(series) > 1:
        c.legend(list(series))
    c.save(path)


def heatmap(path, matrix, row_labels, col_labels, title: str = "", xlabel: str = "predicted",
            ylabel: str = "true") -> None:
    """Count matrix with per-cell annotations (rows = truth)."""
    m = np.asarray(matrix, dtype=np.float64)
    c = _Canvas(title, xlabel, ylabel)
    nr, nc = m.shape
    cw = (W - PAD_L - PAD_R) / nc
    ch = (H - PAD_T - PAD_B) / nr
    top = m.max() if m.max() > 0 else 1.0
    for i in range(nr):
        for j in range(nc):
            shade = int(255 - 200 * m[i, j] / top)
            x, y = PAD_L + j * cw, PAD_T + i * ch
            c.items.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{cw:.1f}" height="{ch:.1f}" '
                           f'fill="rgb({shade},{shade},255)" stroke="white"/>')
            c.items.append(f'<text x="{x + cw / 2:.1f}" y="{y + ch / 2 + 4:.1f}" text-anchor="middle" '
                           f'font-size="11">{int(m[i, j])}</text>')
    for j, lab in enumerate(col_labels):
        c.items.append(f'<text x="{PAD_L + (j + 0.5) * cw:.1f}" y="{H - PAD_B + 14}" '
                       f'text-anchor="middle" font-size="10">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        c.items.append(f'<text x="{PAD_L - 6}" y="{PAD_T + (i + 0.5) * ch + 3:.1f}" '
                       f'text-anchor="end" font-size="10">{escape(str(lab))}</text>')
    c.save(path)


def histograms(path, groups: dict[str, Sequence[float]], bins: int = 40, title: str = "",
               xlabel: str = "distance") -> None:
    """Overlaid step histograms sharing one set of bin edges."""
    allv = np.concatenate([np.asarray(v, dtype=np.float64) for v in groups.values()])
    lo, hi = (float(allv.min()), float(allv.max())) if allv.size else (0.0, 1.0)
    if hi == lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    counts = {k: np.histogram(v, edges)[0] for k, v in groups.items()}
    top = max((int(h.max()) for h in counts.values() if h.size), default=1) or 1
    c = _Canvas(title, xlabel, "count")
    c.axes((lo, hi), (0.0, top * 1.05))
    for i, (name, h) in enumerate(counts.items()):
        col = PALETTE[i % len(PALETTE)]
        pts = [f"{c.px(edges[0]):.1f},{c.py(0):.1f}"]
        for k, n in enumerate(h):
            pts.append(f"{c.px(edges[k]):.1f},{c.py(n):.1f}")
            pts.append(f"{c.px(edges[k + 1]):.1f},{c.py(n):.1f}")
        pts.append(f"{c.px(edges[-1]):.1f},{c.py(0):.1f}")
        c.items.append(f'<polyline points="{" ".join(pts)}" fill="{col}" fill-opacity="0.25" '
                       f'stroke="{col}"/>')
    c.legend(list(counts))
    c.save(path)
