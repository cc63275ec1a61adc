"""Minimal self-contained SVG line charts (log-x) for perplexity curves.

No plotting dependency: the acceptance path must be able to draw its own
figures from its own CSV.
"""

from __future__ import annotations

import math


PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def line_chart_svg(series: dict[str, tuple[list[float], list[float]]],
                   title: str = "", x_label: str = "evaluation length",
                   y_label: str = "perplexity", log_x: bool = True,
                   width: int = 640, height: int = 420,
                   description: str = "") -> str:
    """Render named (xs, ys) series; x axis is log2-scaled by default."""
    ml, mr, mt, mb = 64, 16, 36, 48
    pw, ph = width - ml - mr, height - mt - mb

    def tx(x: float) -> float:
        return math.log2(x) if log_x else x

    all_x = [tx(x) for xs, _ in series.values() for x in xs]
    all_y = [y for _, ys in series.values() for y in ys]
    x_lo, x_hi = min(all_x), max(all_x)
    y_lo, y_hi = min(all_y), max(all_y)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    pad = 0.05 * (y_hi - y_lo) or max(0.05 * abs(y_hi), 1e-6)
    y_lo, y_hi = y_lo - pad, y_hi + pad

    def px(x: float) -> float:
        return ml + (tx(x) - x_lo) / (x_hi - x_lo) * pw

    def py(y: float) -> float:
        return mt + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">']
    if description:
        out.append(f"<desc>{description}</desc>")
    out.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    if title:
        out.append(f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
                   f'font-size="14">{title}</text>')

    # y grid and labels
    for yv in _ticks(y_lo, y_hi):
        yy = py(yv)
        out.append(f'<line x1="{ml}" y1="{yy:.1f}" x2="{width - mr}" y2="{yy:.1f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{ml - 6}" y="{yy + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
    # x ticks at the measured points (deduplicated)
    seen = set()
    for xs, _ in series.values():
        for x in xs:
            if x in seen:
                continue
            seen.add(x)
            xx = px(x)
            out.append(f'<line x1="{xx:.1f}" y1="{mt}" x2="{xx:.1f}" y2="{height - mb}" '
                       f'stroke="#eeeeee"/>')
            out.append(f'<text x="{xx:.1f}" y="{height - mb + 16}" '
                       f'text-anchor="middle">{x:g}</text>')
    out.append(f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" '
               f'stroke="#333333"/>')
    out.append(f'<text x="{width / 2:.1f}" y="{height - 12}" '
               f'text-anchor="middle">{x_label}</text>')
    out.append(f'<text x="16" y="{height / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {height / 2:.1f})">{y_label}</text>')

    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        out.append(f'<text x="{ml + 10}" y="{mt + 18 + 16 * i}" fill="{color}">{name}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"
