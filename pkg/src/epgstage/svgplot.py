"""Tiny deterministic SVG line charts.

Plots are plain text with fixed-precision coordinates so that identical data
produces byte-identical files, which keeps run artifacts diffable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = np.linspace(lo, hi, n)
    return [float(v) for v in raw]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def line_chart(
    path: str | Path,
    series: list[tuple[str, np.ndarray, np.ndarray]],
    title: str = "",
    x_label: str = "",
    y_label: str = "",
    width: int = 760,
    height: int = 380,
    y_range: tuple[float, float] | None = None,
    spans: list[tuple[float, float, str]] | None = None,
) -> Path:
    """Write a multi-series line chart.

    `series` is a list of (label, x, y); `spans` optionally shades x-ranges
    (x0, x1, color), used for phase bands and highlight regions.
    """
    path = Path(path)
    m_left, m_right, m_top, m_bot = 64, 16, 34, 46
    pw, ph = width - m_left - m_right, height - m_top - m_bot

    xs_all = np.concatenate([np.asarray(x, float) for _, x, _ in series if len(x)])
    ys_all = np.concatenate([np.asarray(y, float) for _, _, y in series if len(y)])
    x_lo, x_hi = float(xs_all.min()), float(xs_all.max())
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_range is not None:
        y_lo, y_hi = y_range
    else:
        y_lo, y_hi = float(ys_all.min()), float(ys_all.max())
        if y_hi == y_lo:
            y_hi = y_lo + 1.0
        pad = 0.05 * (y_hi - y_lo)
        y_lo, y_hi = y_lo - pad, y_hi + pad

    def sx(v):
        return m_left + (v - x_lo) / (x_hi - x_lo) * pw

    def sy(v):
        return m_top + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if spans:
        for x0, x1, color in spans:
            out.append(
                f'<rect x="{_fmt(sx(max(x0, x_lo)))}" y="{m_top}" '
                f'width="{_fmt(max(0.0, sx(min(x1, x_hi)) - sx(max(x0, x_lo))))}" '
                f'height="{ph}" fill="{color}" fill-opacity="0.15"/>'
            )
    out.append(
        f'<rect x="{m_left}" y="{m_top}" width="{pw}" height="{ph}" '
        'fill="none" stroke="#444"/>'
    )
    for tx in _ticks(x_lo, x_hi):
        out.append(
            f'<line x1="{_fmt(sx(tx))}" y1="{m_top + ph}" x2="{_fmt(sx(tx))}" '
            f'y2="{m_top + ph + 4}" stroke="#444"/>'
        )
        out.append(
            f'<text x="{_fmt(sx(tx))}" y="{m_top + ph + 18}" '
            f'text-anchor="middle">{tx:g}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        out.append(
            f'<line x1="{m_left - 4}" y1="{_fmt(sy(ty))}" x2="{m_left}" '
            f'y2="{_fmt(sy(ty))}" stroke="#444"/>'
        )
        out.append(
            f'<text x="{m_left - 8}" y="{_fmt(sy(ty) + 4)}" '
            f'text-anchor="end">{ty:.3g}</text>'
        )
    for i, (label, x, y) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(
            f"{_fmt(sx(float(xv)))},{_fmt(sy(float(yv)))}"
            for xv, yv in zip(np.asarray(x, float), np.asarray(y, float))
        )
        out.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.3"/>'
        )
        out.append(
            f'<text x="{m_left + 8 + 130 * i}" y="{m_top - 10}" fill="{color}">'
            f"{label}</text>"
        )
    if title:
        out.append(
            f'<text x="{width // 2}" y="16" text-anchor="middle" '
            f'font-size="13">{title}</text>'
        )
    if x_label:
        out.append(
            f'<text x="{m_left + pw // 2}" y="{height - 8}" '
            f'text-anchor="middle">{x_label}</text>'
        )
    if y_label:
        out.append(
            f'<text x="14" y="{m_top + ph // 2}" text-anchor="middle" '
            f'transform="rotate(-90 14 {m_top + ph // 2})">{y_label}</text>'
        )
    out.append("</svg>")
    path.write_text("\n".join(out) + "\n")
    return path
