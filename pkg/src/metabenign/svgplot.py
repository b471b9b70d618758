"""Minimal self-contained SVG line charts with error bars."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]
    err: list[float] = field(default_factory=list)


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series]
    logx: bool = False
    logy: bool = False
    width: int = 640
    height: int = 420


def _nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 12))
        t += step
    return ticks


def _log_ticks(lo: float, hi: float) -> list[float]:
    return [10.0**e for e in range(math.floor(lo), math.ceil(hi) + 1) if lo - 1e-9 <= e <= hi + 1e-9]


def _fmt(v: float) -> str:
    return f"{v:.3g}"


def render(chart: Chart, header: str = "") -> str:
    """SVG document text; ``header`` goes into a leading XML comment."""
    w, h = chart.width, chart.height
    left, right, top, bottom = 70, 150, 40, 55
    pw, ph = w - left - right, h - top - bottom

    fx = (lambda v: math.log10(v)) if chart.logx else (lambda v: v)
    fy = (lambda v: math.log10(v)) if chart.logy else (lambda v: v)

    pts_x, pts_y = [], []
    for s in chart.series:
        errs = s.err or [0.0] * len(s.y)
        for x, y, e in zip(s.x, s.y, errs):
            if not (math.isfinite(x) and math.isfinite(y)):
                continue
            if chart.logx and x <= 0:
                continue
            pts_x.append(fx(x))
            for v in (y - e, y + e) if math.isfinite(e) else (y,):
                if chart.logy and v <= 0:
                    continue
                pts_y.append(fy(v))
    if not pts_x or not pts_y:
        pts_x, pts_y = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = min(pts_x), max(pts_x)
    y0, y1 = min(pts_y), max(pts_y)
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad

    def px(v):
        return left + (fx(v) - x0) / (x1 - x0) * pw

    def py(v):
        return top + ph - (fy(v) - y0) / (y1 - y0) * ph

    out = []
    if header:
        out.append(f"<!-- {escape(header.replace('--', '- -'))} -->")
    out.append(
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" '
        'font-family="sans-serif" font-size="12">'
    )
    out.append(f'<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>')
    out.append(f'<text x="{left + pw / 2}" y="22" text-anchor="middle" font-size="14">{escape(chart.title)}</text>')
    out.append(f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')

    xt = _log_ticks(x0, x1) if chart.logx else _nice_ticks(x0, x1)
    for t in xt:
        pos = left + ((math.log10(t) if chart.logx else t) - x0) / (x1 - x0) * pw
        out.append(f'<line x1="{pos:.2f}" y1="{top + ph}" x2="{pos:.2f}" y2="{top + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{pos:.2f}" y="{top + ph + 18}" text-anchor="middle">{_fmt(t)}</text>')
    yt = _log_ticks(y0, y1) if chart.logy else _nice_ticks(y0, y1)
    for t in yt:
        pos = top + ph - ((math.log10(t) if chart.logy else t) - y0) / (y1 - y0) * ph
        out.append(f'<line x1="{left - 5}" y1="{pos:.2f}" x2="{left}" y2="{pos:.2f}" stroke="black"/>')
        out.append(f'<text x="{left - 8}" y="{pos + 4:.2f}" text-anchor="end">{_fmt(t)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{h - 12}" text-anchor="middle">{escape(chart.xlabel)}</text>')
    out.append(
        f'<text x="16" y="{top + ph / 2}" text-anchor="middle" transform="rotate(-90 16 {top + ph / 2})">'
        f"{escape(chart.ylabel)}</text>"
    )

    for i, s in enumerate(chart.series):
        color = PALETTE[i % len(PALETTE)]
        errs = s.err or [0.0] * len(s.y)
        pts = []
        for x, y, e in zip(s.x, s.y, errs):
            if not (math.isfinite(x) and math.isfinite(y)) or (chart.logx and x <= 0) or (chart.logy and y <= 0):
                continue
            pts.append((px(x), py(y)))
            if math.isfinite(e) and e > 0:
                lo = y - e
                y_lo = py(lo) if not chart.logy or lo > 0 else top + ph
                y_hi = py(y + e)
                cx = px(x)
                out.append(
                    f'<path d="M{cx:.2f},{y_lo:.2f}V{y_hi:.2f}M{cx - 3:.2f},{y_lo:.2f}h6M{cx - 3:.2f},{y_hi:.2f}h6" '
                    f'stroke="{color}" fill="none"/>'
                )
        if pts:
            d = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" stroke-width="1.5"/>')
            for a, b in pts:
                out.append(f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.5" fill="{color}"/>')
        ly = top + 10 + 18 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 35}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
