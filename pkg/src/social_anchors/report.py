"""Text and SVG rendering of interpretability reports.

Each activation map is drawn as a heat grid with one cell per anchor:
speed rows (slow at the bottom) by direction columns (left turns on the
left), green for the most favourable value in the panel, red for the
least.
"""
from __future__ import annotations

import math

import numpy as np

from .dcm import InterpretabilityReport

PANEL_TITLES = {
    "combined": "combined score",
    "nn": "neural network",
    "dcm": "dcm total",
    "keep_direction": "keep direction",
    "occupancy": "occupancy",
    "collision": "collision avoidance",
    "leader_follower": "leader-follower",
    "probabilities": "probabilities",
}

_CELL = 46
_PAD = 14
_TITLE_H = 22


def _grid_view(report: InterpretabilityReport, values: np.ndarray) -> np.ndarray:
    """(N_s, N_d) view of a flat per-anchor map."""
    cfg = report.anchor_set.config
    grid = np.zeros((cfg.n_speeds, cfg.n_directions))
    grid[report.anchor_set.speed_slot, report.anchor_set.direction_slot] = values
    return grid


def report_text(report: InterpretabilityReport) -> str:
    """Self-describing dump of all panels plus the raw feature table."""
    cfg = report.anchor_set.config
    lines = [
        "anchor grid: %d speed rows x %d direction columns" % (cfg.n_speeds, cfg.n_directions),
        "direction offsets (deg): "
        + " ".join("%+.1f" % math.degrees(d) for d in cfg.direction_offsets),
        "speed multipliers: " + " ".join("%.2f" % m for m in cfg.speed_multipliers),
        "",
    ]
    for name, values in report.panels().items():
        lines.append(f"[{PANEL_TITLES[name]}]")
        grid = _grid_view(report, values)
        for s in reversed(range(cfg.n_speeds)):
            row = " ".join("%10.6f" % v for v in grid[s])
            lines.append(f"  x{cfg.speed_multipliers[s]:<4.2f} {row}")
        lines.append("")
    return "\n".join(lines)


def _cell_color(value: float, lo: float, hi: float) -> str:
    t = 0.5 if hi - lo < 1e-12 else (value - lo) / (hi - lo)
    return "#%02x%02x3c" % (round(255 * (1.0 - t)), round(255 * t))


def report_svg(report: InterpretabilityReport) -> str:
    """All panels side by side as one SVG document."""
    cfg = report.anchor_set.config
    n_s, n_d = cfg.n_speeds, cfg.n_directions
    panels = list(report.panels().items())
    panel_w = n_d * _CELL
    panel_h = n_s * _CELL + _TITLE_H
    width = _PAD + len(panels) * (panel_w + _PAD)
    height = panel_h + 2 * _PAD
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'font-family="monospace" font-size="10">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for p, (name, values) in enumerate(panels):
        ox = _PAD + p * (panel_w + _PAD)
        oy = _PAD
        grid = _grid_view(report, values)
        lo, hi = float(grid.min()), float(grid.max())
        parts.append(f'<text x="{ox}" y="{oy + 12}">{PANEL_TITLES[name]}</text>')
        for s in range(n_s):
            for d in range(n_d):
                # slow row at the bottom
                x = ox + d * _CELL
                y = oy + _TITLE_H + (n_s - 1 - s) * _CELL
                color = _cell_color(grid[s, d], lo, hi)
                parts.append(
                    f'<rect x="{x}" y="{y}" width="{_CELL}" height="{_CELL}" '
                    f'fill="{color}" stroke="#555"/>'
                )
                parts.append(
                    f'<text x="{x + 3}" y="{y + _CELL - 4}">{grid[s, d]:+.2f}</text>'
                )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
