"""Static SVG heatmaps: activation-frequency grids, tuned-minus-base diffs,
shared-expert maps, and annotated pairwise similarity grids. SVG keeps the
output deterministic and diffable."""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

from .analysis import SimilarityReport

SEQ_LOW = (255, 255, 255)    # white
SEQ_HIGH = (139, 0, 0)       # dark red
DIV_NEG = (5, 113, 176)      # blue
DIV_MID = (255, 255, 255)    # white (exactly the zero color)
DIV_POS = (202, 0, 32)       # red


@dataclass
class HeatmapSpec:
    grid: np.ndarray
    scale: str = "sequential"  # or "diverging"
    x_label: str = "expert"
    y_label: str = "layer"
    cell_size: int = 4
    title: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2 or self.grid.size == 0:
            raise ValueError("grid must be a non-empty 2-D matrix")
        if not np.isfinite(self.grid).all():
            raise ValueError("non-finite cell value in heatmap grid")
        if self.scale not in ("sequential", "diverging"):
            raise ValueError(f"unknown scale {self.scale!r}")


def _lerp(lo: tuple, hi: tuple, t: float) -> str:
    rgb = [round(a + (b - a) * t) for a, b in zip(lo, hi)]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def sequential_color(value: float, vmin: float, vmax: float) -> str:
    t = 0.0 if vmax == vmin else (value - vmin) / (vmax - vmin)
    return _lerp(SEQ_LOW, SEQ_HIGH, t)


def diverging_color(value: float, vabs: float) -> str:
    """Blue below zero, white at exactly zero, red above; symmetric in
    value."""
    if value == 0 or vabs == 0:
        return _lerp(DIV_MID, DIV_MID, 0.0)
    t = min(abs(value) / vabs, 1.0)
    return _lerp(DIV_MID, DIV_POS, t) if value > 0 else _lerp(DIV_MID, DIV_NEG, t)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def render_heatmap(spec: HeatmapSpec, out_path) -> None:
    """Write an SVG with one rect of class "cell" per grid entry plus axis
    labels and a min/mid/max legend."""
    n_rows, n_cols = spec.grid.shape
    cs = spec.cell_size
    margin_left, margin_top = 60, 40
    legend_h = 40
    width = margin_left + n_cols * cs + 20
    height = margin_top + n_rows * cs + legend_h + 20

    vmin = float(spec.grid.min())
    vmax = float(spec.grid.max())
    vabs = max(abs(vmin), abs(vmax))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{margin_left}" y="20" font-size="14">{escape(spec.title)}</text>',
    ]
    for r in range(n_rows):
        y = margin_top + r * cs
        for c in range(n_cols):
            v = float(spec.grid[r, c])
            color = (sequential_color(v, vmin, vmax) if spec.scale == "sequential"
                     else diverging_color(v, vabs))
            parts.append(
                f'<rect class="cell" x="{margin_left + c * cs}" y="{y}" '
                f'width="{cs}" height="{cs}" fill="{color}"/>')
    parts.append(
        f'<text x="{margin_left + n_cols * cs // 2}" '
        f'y="{margin_top + n_rows * cs + 16}" font-size="11" '
        f'text-anchor="middle">{escape(spec.x_label)}</text>')
    parts.append(
        f'<text x="16" y="{margin_top + n_rows * cs // 2}" font-size="11" '
        f'text-anchor="middle" transform="rotate(-90 16 '
        f'{margin_top + n_rows * cs // 2})">{escape(spec.y_label)}</text>')
    legend_y = margin_top + n_rows * cs + legend_h - 10
    if spec.scale == "sequential":
        legend = f"min={_fmt(vmin)} max={_fmt(vmax)}"
    else:
        legend = f"-{_fmt(vabs)} .. 0 .. +{_fmt(vabs)}"
    parts.append(
        f'<text class="legend" x="{margin_left}" y="{legend_y}" '
        f'font-size="10">{escape(legend)}</text>')
    parts.append("</svg>")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def _render_annotated_grid(values: np.ndarray, tags: list[str], title: str,
                           scale: str, out_path) -> None:
    n = len(tags)
    cs = 56
    margin = 80
    width = margin + n * cs + 20
    height = margin + n * cs + 20
    vmin, vmax = float(values.min()), float(values.max())
    vabs = max(abs(vmin), abs(vmax))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<text x="{margin}" y="24" font-size="14">{escape(title)}</text>',
    ]
    for i, tag in enumerate(tags):
        parts.append(
            f'<text x="{margin + i * cs + cs // 2}" y="{margin - 8}" '
            f'font-size="11" text-anchor="middle">{escape(tag)}</text>')
        parts.append(
            f'<text x="{margin - 8}" y="{margin + i * cs + cs // 2 + 4}" '
            f'font-size="11" text-anchor="end">{escape(tag)}</text>')
    for r in range(n):
        for c in range(n):
            v = float(values[r, c])
            color = (sequential_color(v, vmin, vmax) if scale == "sequential"
                     else diverging_color(v, vabs))
            x, y = margin + c * cs, margin + r * cs
            parts.append(
                f'<rect class="cell" x="{x}" y="{y}" width="{cs}" '
                f'height="{cs}" fill="{color}" stroke="#999"/>')
            parts.append(
                f'<text class="value" x="{x + cs // 2}" y="{y + cs // 2 + 4}" '
                f'font-size="10" text-anchor="middle">{_fmt(v)}</text>')
    parts.append("</svg>")
    with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(parts) + "\n")


def render_similarity(report: SimilarityReport, out_dir) -> list[str]:
    """One annotated L x L heatmap per metric; returns the written paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    jobs = [
        ("euclidean", report.euclidean, "Euclidean distance", "sequential"),
        ("kl", report.kl, "Row-wise KL divergence (row || column)", "sequential"),
        ("pearson", report.pearson, "Mean row-wise Pearson correlation", "diverging"),
    ]
    written = []
    for name, values, title, scale in jobs:
        path = os.path.join(out_dir, f"{name}.svg")
        _render_annotated_grid(values, report.language_tags, title, scale, path)
        written.append(path)
    return written
