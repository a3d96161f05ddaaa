"""Dependency-free SVG emission for scene overlays and metric curves.

Every figure gets a sidecar CSV holding exactly the values drawn, so plots
are diffable and regenerable without parsing SVG.
"""

from __future__ import annotations

import numpy as np

from .artifacts import atomic_write_text
from .errors import DomainError

_WIDTH, _HEIGHT, _MARGIN = 640.0, 480.0, 40.0


class _Canvas:
    """Maps data coordinates into one SVG viewport."""

    def __init__(self, xs, ys):
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        if xs.size == 0:
            raise DomainError("nothing to plot")
        x_lo, x_hi = float(xs.min()), float(xs.max())
        y_lo, y_hi = float(ys.min()), float(ys.max())
        self.x_lo, self.x_span = x_lo, max(x_hi - x_lo, 1e-9)
        self.y_lo, self.y_span = y_lo, max(y_hi - y_lo, 1e-9)
        self.parts = []

    def map_point(self, x, y):
        px = _MARGIN + (x - self.x_lo) / self.x_span * (_WIDTH - 2 * _MARGIN)
        py = _HEIGHT - _MARGIN - (y - self.y_lo) / self.y_span * (_HEIGHT - 2 * _MARGIN)
        return px, py

    def polyline(self, points, stroke, width=1.5, opacity=1.0, dash=None):
        mapped = " ".join(f"{px:.2f},{py:.2f}" for px, py in (self.map_point(x, y) for x, y in points))
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<polyline points="{mapped}" fill="none" stroke="{stroke}" '
            f'stroke-width="{width}" stroke-opacity="{opacity}"{dash_attr} />'
        )

    def text(self, x_px, y_px, label, size=13):
        self.parts.append(f'<text x="{x_px}" y="{y_px}" font-size="{size}" font-family="sans-serif">{label}</text>')

    def render(self, title=""):
        body = "\n".join(self.parts)
        caption = f'<text x="{_MARGIN}" y="22" font-size="15" font-family="sans-serif">{title}</text>' if title else ""
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH:.0f}" height="{_HEIGHT:.0f}" '
            f'viewBox="0 0 {_WIDTH:.0f} {_HEIGHT:.0f}">\n'
            f'<rect width="100%" height="100%" fill="white" />\n{caption}\n{body}\n</svg>\n'
        )


def scene_overlay_svg(scene, prediction_sets, svg_path, csv_path):
    """Observed past, ground-truth future, and the N samples per agent.

    Exactly N + 2 polylines per agent: one observed, one future, N samples.
    The sidecar CSV lists every plotted vertex.
    """
    if len(prediction_sets) != len(scene.agents):
        raise DomainError(
            f"scene has {len(scene.agents)} agents but {len(prediction_sets)} prediction sets"
        )
    all_pts = [scene.observed_stack().reshape(-1, 2), scene.future_stack().reshape(-1, 2)]
    all_pts += [p.samples.reshape(-1, 2) for p in prediction_sets]
    pts = np.concatenate(all_pts, axis=0)
    canvas = _Canvas(pts[:, 0], pts[:, 1])

    lines = ["scene_id,agent_id,kind,sample_idx,t,x,y"]

    def record(agent_id, kind, sample_idx, track):
        for t, (x, y) in enumerate(track):
            lines.append(f"{scene.scene_id},{agent_id},{kind},{sample_idx},{t},{repr(float(x))},{repr(float(y))}")

    for agent, pset in zip(scene.agents, prediction_sets):
        # samples first so truth draws on top
        for s_idx in range(pset.n):
            bridge = np.concatenate([agent.observed[-1:], pset.samples[s_idx]], axis=0)
            canvas.polyline(bridge, stroke="#4878cf", width=1.0, opacity=0.35)
            record(agent.agent_id, "sample", s_idx, pset.samples[s_idx])
        canvas.polyline(agent.observed, stroke="#111111", width=2.0)
        record(agent.agent_id, "observed", -1, agent.observed)
        gt = np.concatenate([agent.observed[-1:], agent.future], axis=0)
        canvas.polyline(gt, stroke="#2ca02c", width=2.0, dash="5,3")
        record(agent.agent_id, "future", -1, agent.future)

    atomic_write_text(svg_path, canvas.render(title=f"scene {scene.scene_id}"))
    atomic_write_text(csv_path, "\n".join(lines) + "\n")


def curve_svg(x_values, series, svg_path, csv_path, title="", x_label="x"):
    """Plot named series over shared x values, with the values in a sidecar CSV."""
    x_values = list(x_values)
    if not x_values or not series:
        raise DomainError("curve needs at least one x value and one series")
    ys = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    canvas = _Canvas(np.asarray(x_values, dtype=np.float64), ys)
    palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#e377c2"]
    for i, (name, values) in enumerate(series.items()):
        canvas.polyline(list(zip(x_values, values)), stroke=palette[i % len(palette)], width=2.0)
        px, py = canvas.map_point(x_values[-1], values[-1])
        canvas.text(min(px + 4, _WIDTH - _MARGIN), py, name)
    canvas.text(_WIDTH / 2, _HEIGHT - 8, x_label)

    header = [x_label] + list(series)
    lines = [",".join(header)]
    for i, x in enumerate(x_values):
        cells = [repr(float(x))] + [repr(float(series[name][i])) for name in series]
        lines.append(",".join(cells))
    atomic_write_text(svg_path, canvas.render(title=title))
    atomic_write_text(csv_path, "\n".join(lines) + "\n")
