"""Minimal hand-rolled SVG charts.

No plotting dependency on purpose: the output must be byte-stable across
runs and platforms so tests can golden it.  Supports scatter points and
polylines on linear or log10 x axes, which covers every figure this
package emits (rate-distortion sweeps, allocation scatter, metric traces).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

WIDTH = 640
HEIGHT = 420
MARGIN_L = 64
MARGIN_R = 16
MARGIN_T = 34
MARGIN_B = 46

PALETTE = ("#1f6fb2", "#d1495b", "#3a9e5f", "#8a5fbf", "#b8860b", "#2aa0a4")


@dataclass(frozen=True)
class Series:
    """One plotted series; kind is 'line', 'points', or 'both'."""

    label: str
    x: Sequence[float]
    y: Sequence[float]
    kind: str = "line"

    def __post_init__(self):
        if self.kind not in ("line", "points", "both"):
            raise ValueError(f"unknown series kind {self.kind!r}")
        if len(self.x) != len(self.y):
            raise ValueError("series x and y lengths differ")
        if not self.x:
            raise ValueError(f"series {self.label!r} is empty")


def _nice_ticks(lo: float, hi: float, target: int = 5) -> list[float]:
    """Ticks at 1/2/5 x 10^k steps covering [lo, hi]."""
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / max(target, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 5.0, 10.0):
        step = mult * mag
        if (hi - lo) / step <= target:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    t = first
    while t <= hi + 1e-9 * step:
        ticks.append(0.0 if abs(t) < 1e-12 * step else t)
        t += step
    return ticks


def _fmt_tick(v: float) -> str:
    return f"{v:g}"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def svg_chart(
    series: Sequence[Series],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    log_x: bool = False,
) -> str:
    """Self-contained SVG document for the given series."""
    if not series:
        raise ValueError("no series to plot")
    xs = [float(v) for s in series for v in s.x]
    ys = [float(v) for s in series for v in s.y]
    if log_x:
        if min(xs) <= 0:
            raise ValueError("log_x requires positive x values")
        xs = [math.log10(v) for v in xs]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad_x = 0.04 * (x_hi - x_lo)
    pad_y = 0.06 * (y_hi - y_lo)
    x_lo, x_hi = x_lo - pad_x, x_hi + pad_x
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y

    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x: float) -> float:
        if log_x:
            x = math.log10(x)
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return MARGIN_T + (y_hi - y) / (y_hi - y_lo) * plot_h

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" '
        f'height="{plot_h}" fill="none" stroke="#444444"/>',
    ]
    font = 'font-family="sans-serif" font-size="12"'
    if title:
        out.append(
            f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" '
            f'{font} font-weight="bold">{_escape(title)}</text>'
        )
    if xlabel:
        out.append(
            f'<text x="{MARGIN_L + plot_w / 2:.1f}" y="{HEIGHT - 10}" '
            f'text-anchor="middle" {font}>{_escape(xlabel)}</text>'
        )
    if ylabel:
        yc = MARGIN_T + plot_h / 2
        out.append(
            f'<text x="16" y="{yc:.1f}" text-anchor="middle" {font} '
            f'transform="rotate(-90 16 {yc:.1f})">{_escape(ylabel)}</text>'
        )

    for t in _nice_ticks(x_lo, x_hi):
        x = MARGIN_L + (t - x_lo) / (x_hi - x_lo) * plot_w
        label = f"1e{t:g}" if log_x else _fmt_tick(t)
        out.append(
            f'<line x1="{x:.2f}" y1="{MARGIN_T + plot_h}" x2="{x:.2f}" '
            f'y2="{MARGIN_T + plot_h + 4}" stroke="#444444"/>'
        )
        out.append(
            f'<text x="{x:.2f}" y="{MARGIN_T + plot_h + 18}" '
            f'text-anchor="middle" {font}>{label}</text>'
        )
    for t in _nice_ticks(y_lo, y_hi):
        y = MARGIN_T + (y_hi - t) / (y_hi - y_lo) * plot_h
        out.append(
            f'<line x1="{MARGIN_L - 4}" y1="{y:.2f}" x2="{MARGIN_L}" '
            f'y2="{y:.2f}" stroke="#444444"/>'
        )
        out.append(
            f'<text x="{MARGIN_L - 8}" y="{y + 4:.2f}" text-anchor="end" '
            f'{font}>{_fmt_tick(t)}</text>'
        )

    for k, s in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = [(px(float(xv)), py(float(yv))) for xv, yv in zip(s.x, s.y)]
        if s.kind in ("line", "both"):
            coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" '
                f'stroke-width="1.5"/>'
            )
        if s.kind in ("points", "both"):
            for x, y in pts:
                out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" fill="{color}"/>')
        ly = MARGIN_T + 14 + 16 * k
        lx = MARGIN_L + plot_w - 150
        out.append(
            f'<line x1="{lx}" y1="{ly - 4}" x2="{lx + 18}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="3"/>'
        )
        out.append(f'<text x="{lx + 24}" y="{ly}" {font}>{_escape(s.label)}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_svg(path, svg_text: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(svg_text)
