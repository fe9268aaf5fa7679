"""Tiny standalone SVG line plots with byte-stable output.

Matplotlib would embed timestamps and session ids in its SVG metadata;
re-running a report must reproduce identical bytes, so plots are emitted
directly with fixed float formatting.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

from .fileio import atomic_write_text

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 20, 40, 45


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float) -> list[float]:
    return [lo, lo + (hi - lo) / 2.0, hi]


def line_plot(series: Sequence[tuple[str, Sequence[float], Sequence[float]]],
              path: str | Path, title: str = "", xlabel: str = "",
              ylabel: str = "", equal_axes: bool = False) -> None:
    """Write a multi-series line plot; each series is (label, xs, ys)."""
    pts = [(x, y) for _, xs, ys in series for x, y in zip(xs, ys)]
    if pts:
        x_lo, x_hi = min(p[0] for p in pts), max(p[0] for p in pts)
        y_lo, y_hi = min(p[1] for p in pts), max(p[1] for p in pts)
    else:
        x_lo = y_lo = 0.0
        x_hi = y_hi = 1.0
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    if equal_axes:
        span = max(x_hi - x_lo, y_hi - y_lo)
        x_hi, y_hi = x_lo + span, y_lo + span

    pw, ph = _W - _ML - _MR, _H - _MT - _MB

    def sx(x: float) -> float:
        return _ML + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y: float) -> float:
        return _MT + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>',
           f'<rect x="{_ML}" y="{_MT}" width="{pw}" height="{ph}" fill="none" '
           'stroke="#444" stroke-width="1"/>']
    if title:
        out.append(f'<text x="{_W // 2}" y="24" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="15">{title}</text>')
    for tx in _ticks(x_lo, x_hi):
        out.append(f'<text x="{_fmt(sx(tx))}" y="{_H - _MB + 18}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        out.append(f'<text x="{_ML - 6}" y="{_fmt(sy(ty) + 4)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{_fmt(ty)}</text>')
    if xlabel:
        out.append(f'<text x="{_W // 2}" y="{_H - 8}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{_H // 2}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="12" '
                   f'transform="rotate(-90 14 {_H // 2})">{ylabel}</text>')
    for i, (label, xs, ys) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys))
        if len(xs) == 1:
            out.append(f'<circle cx="{_fmt(sx(xs[0]))}" cy="{_fmt(sy(ys[0]))}" '
                       f'r="3" fill="{color}"/>')
        elif coords:
            out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" '
                       'stroke-width="1.5"/>')
        if label:
            ly = _MT + 16 + 16 * i
            out.append(f'<line x1="{_ML + 8}" y1="{ly - 4}" x2="{_ML + 28}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="2"/>')
            out.append(f'<text x="{_ML + 33}" y="{ly}" font-family="sans-serif" '
                       f'font-size="11">{label}</text>')
    out.append("</svg>")
    atomic_write_text(path, "\n".join(out) + "\n")
