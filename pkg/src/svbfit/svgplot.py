"""Minimal deterministic SVG line plots (one polyline per trace)."""

from __future__ import annotations

import numpy as np

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def polyline_plot(traces, x_values=None, width=640, height=420, margin=50,
                  x_label="epoch", y_label="free energy", title="") -> str:
    """Render traces (list of 1-D arrays) as an SVG document string."""
    traces = [np.asarray(t, dtype=float) for t in traces]
    if not traces or any(t.size == 0 for t in traces):
        raise ValueError("need at least one non-empty trace")
    if x_values is None:
        xs = [np.arange(t.size, dtype=float) for t in traces]
    else:
        xs = [np.asarray(x, dtype=float) for x in x_values]
    finite_y = np.concatenate([t[np.isfinite(t)] for t in traces])
    finite_x = np.concatenate([x[np.isfinite(x)] for x in xs])
    if finite_y.size == 0:
        raise ValueError("traces contain no finite values")
    y_min, y_max = float(finite_y.min()), float(finite_y.max())
    x_min, x_max = float(finite_x.min()), float(finite_x.max())
    if y_max == y_min:
        y_max = y_min + 1.0
    if x_max == x_min:
        x_max = x_min + 1.0

    def sx(v):
        return margin + (v - x_min) / (x_max - x_min) * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_min) / (y_max - y_min) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 10}" text-anchor="middle" '
        f'font-size="13">{x_label}</text>',
        f'<text x="14" y="{height / 2:.1f}" text-anchor="middle" font-size="13" '
        f'transform="rotate(-90 14 {height / 2:.1f})">{y_label}</text>',
    ]
    if title:
        parts.append(
            f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-size="14">{title}</text>'
        )
    for i, (x, t) in enumerate(zip(xs, traces)):
        keep = np.isfinite(t) & np.isfinite(x)
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x[keep], t[keep]))
        color = _COLORS[i % len(_COLORS)]
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
