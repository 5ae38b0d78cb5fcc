"""Minimal deterministic SVG plots (no timestamps, fixed formatting)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = ["Series", "line_plot", "histogram", "stacked_bars"]

_W, _H = 640, 420
_ML, _MR, _MT, _MB = 64, 16, 36, 46
_PW, _PH = _W - _ML - _MR, _H - _MT - _MB

_PALETTE = ["#1f6fb4", "#777777", "#2a9d5c", "#c2452f", "#8855aa", "#b8860b"]


@dataclass
class Series:
    x: Sequence[float]
    y: Sequence[float]
    label: str = ""
    color: str = ""
    dash: str = ""  # e.g. "6,3"
    band_low: Sequence[float] | None = None
    band_high: Sequence[float] | None = None


def _fmt(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".")


def _scale(vals, lo, hi, out_lo, out_hi):
    vals = np.asarray(vals, dtype=float)
    span = hi - lo if hi > lo else 1.0
    return out_lo + (vals - lo) / span * (out_hi - out_lo)


def _axis_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min(s * mag for s in (1, 2, 5, 10) if s * mag >= raw)
    start = np.ceil(lo / step) * step
    return [float(t) for t in np.arange(start, hi + 0.5 * step, step)]


def _header(title: str) -> list[str]:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
    ]
    if title:
        parts.append(
            f'<text x="{_W // 2}" y="22" text-anchor="middle" '
            f'font-family="sans-serif" font-size="14">{title}</text>'
        )
    return parts


def _axes(parts: list[str], x_lo, x_hi, y_lo, y_hi, xlabel, ylabel) -> None:
    parts.append(
        f'<rect x="{_ML}" y="{_MT}" width="{_PW}" height="{_PH}" '
        f'fill="none" stroke="#333333" stroke-width="1"/>'
    )
    for t in _axis_ticks(x_lo, x_hi):
        px = _scale(t, x_lo, x_hi, _ML, _ML + _PW)
        parts.append(
            f'<line x1="{px:.1f}" y1="{_MT + _PH}" x2="{px:.1f}" '
            f'y2="{_MT + _PH + 4}" stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{px:.1f}" y="{_MT + _PH + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
    for t in _axis_ticks(y_lo, y_hi):
        py = _scale(t, y_lo, y_hi, _MT + _PH, _MT)
        parts.append(
            f'<line x1="{_ML - 4}" y1="{py:.1f}" x2="{_ML}" y2="{py:.1f}" '
            f'stroke="#333333"/>'
        )
        parts.append(
            f'<text x="{_ML - 8}" y="{py + 4:.1f}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_fmt(t)}</text>'
        )
    if xlabel:
        parts.append(
            f'<text x="{_ML + _PW // 2}" y="{_H - 10}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12">{xlabel}</text>'
        )
    if ylabel:
        parts.append(
            f'<text x="16" y="{_MT + _PH // 2}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="12" '
            f'transform="rotate(-90 16 {_MT + _PH // 2})">{ylabel}</text>'
        )


def line_plot(
    series: Sequence[Series],
    path: str | Path,
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    vline: float | None = None,
) -> None:
    xs = np.concatenate([np.asarray(s.x, dtype=float) for s in series])
    ys = [np.asarray(s.y, dtype=float) for s in series]
    for s in series:
        if s.band_high is not None:
            ys.append(np.asarray(s.band_high, dtype=float))
    yv = np.concatenate(ys)
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = 0.0, float(yv.max()) * 1.08 if yv.max() > 0 else 1.0

    parts = _header(title)
    _axes(parts, x_lo, x_hi, y_lo, y_hi, xlabel, ylabel)

    for i, s in enumerate(series):
        color = s.color or _PALETTE[i % len(_PALETTE)]
        px = _scale(s.x, x_lo, x_hi, _ML, _ML + _PW)
        if s.band_low is not None and s.band_high is not None:
            lo_y = _scale(s.band_low, y_lo, y_hi, _MT + _PH, _MT)
            hi_y = _scale(s.band_high, y_lo, y_hi, _MT + _PH, _MT)
            pts = [f"{x:.1f},{y:.1f}" for x, y in zip(px, hi_y)]
            pts += [f"{x:.1f},{y:.1f}" for x, y in zip(px[::-1], lo_y[::-1])]
            parts.append(
                f'<polygon points="{" ".join(pts)}" fill="{color}" '
                f'fill-opacity="0.18" stroke="none"/>'
            )
        py = _scale(s.y, y_lo, y_hi, _MT + _PH, _MT)
        pts = " ".join(f"{x:.1f},{y:.1f}" for x, y in zip(px, py))
        dash = f' stroke-dasharray="{s.dash}"' if s.dash else ""
        parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" '
            f'stroke-width="1.6"{dash}/>'
        )
        if s.label:
            ly = _MT + 16 + 16 * i
            parts.append(
                f'<line x1="{_ML + _PW - 130}" y1="{ly - 4}" '
                f'x2="{_ML + _PW - 104}" y2="{ly - 4}" stroke="{color}" '
                f'stroke-width="1.6"{dash}/>'
            )
            parts.append(
                f'<text x="{_ML + _PW - 98}" y="{ly}" font-family="sans-serif" '
                f'font-size="11">{s.label}</text>'
            )
    if vline is not None and x_lo <= vline <= x_hi:
        px = _scale(vline, x_lo, x_hi, _ML, _ML + _PW)
        parts.append(
            f'<line x1="{px:.1f}" y1="{_MT}" x2="{px:.1f}" y2="{_MT + _PH}" '
            f'stroke="#222222" stroke-width="1" stroke-dasharray="3,3"/>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def histogram(
    values: Sequence[float],
    path: str | Path,
    bins: int = 20,
    lo: float = 0.0,
    hi: float = 1.0,
    title: str = "",
    xlabel: str = "",
    vline: float | None = None,
) -> None:
    vals = np.asarray([v for v in values if v is not None and np.isfinite(v)], dtype=float)
    counts, edges = np.histogram(vals, bins=bins, range=(lo, hi))
    y_hi = max(float(counts.max()), 1.0) * 1.1
    parts = _header(title)
    _axes(parts, lo, hi, 0.0, y_hi, xlabel, "count")
    for c, e0, e1 in zip(counts, edges[:-1], edges[1:]):
        x0 = _scale(e0, lo, hi, _ML, _ML + _PW)
        x1 = _scale(e1, lo, hi, _ML, _ML + _PW)
        y = _scale(c, 0.0, y_hi, _MT + _PH, _MT)
        parts.append(
            f'<rect x="{x0:.1f}" y="{y:.1f}" width="{x1 - x0:.1f}" '
            f'height="{_MT + _PH - y:.1f}" fill="{_PALETTE[0]}" '
            f'fill-opacity="0.75" stroke="white" stroke-width="0.5"/>'
        )
    if vline is not None:
        px = _scale(vline, lo, hi, _ML, _ML + _PW)
        parts.append(
            f'<line x1="{px:.1f}" y1="{_MT}" x2="{px:.1f}" y2="{_MT + _PH}" '
            f'stroke="#222222" stroke-width="1" stroke-dasharray="3,3"/>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def stacked_bars(
    groups: Sequence[str],
    segments: Sequence[tuple[str, Sequence[float], str]],
    path: str | Path,
    title: str = "",
    ylabel: str = "",
    baselines: Sequence[float] | None = None,
) -> None:
    """Bars per group stacked from per-segment heights (segments may carry a
    baseline offset so bars can start above zero)."""
    n = len(groups)
    base = np.zeros(n) if baselines is None else np.asarray(baselines, dtype=float)
    tops = base.copy()
    for _, heights, _ in segments:
        tops = tops + np.asarray(heights, dtype=float)
    y_hi = float(tops.max()) * 1.15 if n else 1.0
    parts = _header(title)
    _axes(parts, 0.0, float(n), 0.0, y_hi, "", ylabel)
    width = _PW / max(n, 1) * 0.55
    cur = base.copy()
    for si, (label, heights, color) in enumerate(segments):
        h = np.asarray(heights, dtype=float)
        for i in range(n):
            cx = _ML + _PW * (i + 0.5) / n
            y0 = _scale(cur[i], 0.0, y_hi, _MT + _PH, _MT)
            y1 = _scale(cur[i] + h[i], 0.0, y_hi, _MT + _PH, _MT)
            parts.append(
                f'<rect x="{cx - width / 2:.1f}" y="{y1:.1f}" '
                f'width="{width:.1f}" height="{max(y0 - y1, 0.0):.1f}" '
                f'fill="{color}" fill-opacity="0.85"/>'
            )
        cur += h
        ly = _MT + 16 + 16 * si
        parts.append(
            f'<rect x="{_ML + _PW - 130}" y="{ly - 10}" width="12" height="10" '
            f'fill="{color}" fill-opacity="0.85"/>'
        )
        parts.append(
            f'<text x="{_ML + _PW - 112}" y="{ly}" font-family="sans-serif" '
            f'font-size="11">{label}</text>'
        )
    for i, g in enumerate(groups):
        cx = _ML + _PW * (i + 0.5) / n
        parts.append(
            f'<text x="{cx:.1f}" y="{_MT + _PH + 18}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{g}</text>'
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")
