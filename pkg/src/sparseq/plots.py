"""Minimal SVG writers for diagnostic figures.

Only what the reports need: line plots, scatter plots with a colour ramp and
boxplots drawn from five-number summaries. Output is plain text and fully
deterministic for identical inputs.
"""

from __future__ import annotations

from html import escape

import numpy as np

W, H = 480, 360
L, R, T, B = 60, 20, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _f(v: float) -> str:
    return f"{v:.2f}"


class _Axes:
    def __init__(self, xlim, ylim):
        self.x0, self.x1 = xlim
        self.y0, self.y1 = ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0

    def px(self, x):
        return L + (x - self.x0) / (self.x1 - self.x0) * (W - L - R)

    def py(self, y):
        return H - B - (y - self.y0) / (self.y1 - self.y0) * (H - T - B)


def _frame(ax: _Axes, title: str, xlabel: str, ylabel: str, xticks=None) -> list[str]:
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{L}" y1="{H - B}" x2="{W - R}" y2="{H - B}" stroke="black"/>',
        f'<line x1="{L}" y1="{T}" x2="{L}" y2="{H - B}" stroke="black"/>',
        f'<text x="{(L + W - R) / 2}" y="{H - 10}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
        f'<text x="14" y="{(T + H - B) / 2}" text-anchor="middle" font-size="11" '
        f'transform="rotate(-90 14 {(T + H - B) / 2})">{escape(ylabel)}</text>',
    ]
    for v in np.linspace(ax.y0, ax.y1, 5):
        y = ax.py(v)
        out.append(f'<line x1="{L - 4}" y1="{_f(y)}" x2="{L}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<text x="{L - 6}" y="{_f(y + 4)}" text-anchor="end" font-size="10">{v:.3g}</text>')
    if xticks is None:
        xticks = [(v, f"{v:.3g}") for v in np.linspace(ax.x0, ax.x1, 5)]
    for v, lab in xticks:
        x = ax.px(v)
        out.append(f'<line x1="{_f(x)}" y1="{H - B}" x2="{_f(x)}" y2="{H - B + 4}" stroke="black"/>')
        out.append(f'<text x="{_f(x)}" y="{H - B + 16}" text-anchor="middle" font-size="10">{escape(lab)}</text>')
    return out


def line_plot(series: dict[str, tuple], title: str, xlabel: str, ylabel: str,
              xlim=(0.0, 1.0), ylim=(0.0, 1.0), diagonal: bool = False) -> str:
    """One polyline per entry of ``series`` (name -> (xs, ys))."""
    ax = _Axes(xlim, ylim)
    out = _frame(ax, title, xlabel, ylabel)
    if diagonal:
        out.append(
            f'<line x1="{_f(ax.px(xlim[0]))}" y1="{_f(ax.py(ylim[0]))}" x2="{_f(ax.px(xlim[1]))}" '
            f'y2="{_f(ax.py(ylim[1]))}" stroke="#999" stroke-dasharray="4 3"/>'
        )
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_f(ax.px(x))},{_f(ax.py(y))}" for x, y in zip(xs, ys))
        out.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                   f'<title>{escape(name)}</title></polyline>')
        ly = T + 12 + 14 * i
        out.append(f'<line x1="{L + 10}" y1="{ly}" x2="{L + 28}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{L + 32}" y="{ly + 4}" font-size="10">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _ramp(t: float) -> str:
    # light yellow -> dark red
    t = min(max(t, 0.0), 1.0)
    r = int(255 - 115 * t)
    g = int(237 * (1 - t))
    b = int(160 * (1 - t))
    return f"#{r:02x}{g:02x}{b:02x}"


def scatter_plot(x, y, color, title: str, xlabel: str, ylabel: str, lim=(0.0, 50.0),
                 max_points: int = 2000) -> str:
    """Scatter of ``(x, y)`` clipped to ``lim`` and coloured by ``color``.

    At most ``max_points`` evenly strided points are drawn.
    """
    x = np.clip(np.asarray(x, dtype=float), *lim)
    y = np.clip(np.asarray(y, dtype=float), *lim)
    c = np.asarray(color, dtype=float)
    stride = max(1, int(np.ceil(len(x) / max_points)))
    x, y, c = x[::stride], y[::stride], c[::stride]
    ax = _Axes(lim, lim)
    out = _frame(ax, title, xlabel, ylabel)
    out.append(f'<line x1="{_f(ax.px(lim[0]))}" y1="{_f(ax.py(lim[0]))}" x2="{_f(ax.px(lim[1]))}" '
               f'y2="{_f(ax.py(lim[1]))}" stroke="#999" stroke-dasharray="4 3"/>')
    lo, hi = (float(np.min(c)), float(np.max(c))) if len(c) else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    for xi, yi, ci in zip(x, y, c):
        out.append(f'<circle cx="{_f(ax.px(xi))}" cy="{_f(ax.py(yi))}" r="1.6" fill="{_ramp((ci - lo) / span)}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def boxplot(groups: dict[str, dict], title: str, ylabel: str) -> str:
    """Boxes from five-number summaries; groups without a summary are skipped."""
    groups = {k: v for k, v in groups.items() if v}
    n = max(len(groups), 1)
    top = max((s["max"] for s in groups.values()), default=1.0)
    bottom = min((s["min"] for s in groups.values()), default=0.0)
    ax = _Axes((0.0, float(n)), (min(0.0, bottom), top * 1.05 if top > 0 else 1.0))
    ticks = [(i + 0.5, name) for i, name in enumerate(groups)]
    out = _frame(ax, title, "", ylabel, xticks=ticks)
    for i, (name, s) in enumerate(groups.items()):
        cx = ax.px(i + 0.5)
        half = 0.25 * (W - L - R) / n
        color = PALETTE[i % len(PALETTE)]
        out.append(f'<line x1="{_f(cx)}" y1="{_f(ax.py(s["min"]))}" x2="{_f(cx)}" y2="{_f(ax.py(s["max"]))}" stroke="black"/>')
        out.append(
            f'<rect class="box" x="{_f(cx - half)}" y="{_f(ax.py(s["q3"]))}" width="{_f(2 * half)}" '
            f'height="{_f(max(ax.py(s["q1"]) - ax.py(s["q3"]), 0.5))}" fill="{color}" fill-opacity="0.4" stroke="black">'
            f'<title>{escape(name)}</title></rect>'
        )
        out.append(f'<line x1="{_f(cx - half)}" y1="{_f(ax.py(s["median"]))}" x2="{_f(cx + half)}" '
                   f'y2="{_f(ax.py(s["median"]))}" stroke="black" stroke-width="2"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
