"""Satisfaction-probability heatmaps from the synthesis CSV exports.

The value CSV schema is (x1_center, x2_center, q, layer, value); the waypoint
file carries the tube radius and per-waypoint coordinates with an optional
value column. Rendering is read-only, the colormap is perceptually uniform
with the range pinned to [0, 1] so figures stay comparable, and identical
inputs produce identical image bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle, Rectangle

COLORMAP = "viridis"
FIGSIZE = (6.4, 5.4)
DPI = 130


class SchemaError(ValueError):
    """The CSV is missing a required column."""


class SelectorError(ValueError):
    """The requested (q, layer) selection matches no rows."""


@dataclass(frozen=True)
class PlotSpec:
    """One heatmap request over the exported artifacts."""

    values_csv: str
    output_path: str
    q: Optional[int] = None
    layer: Optional[str] = None
    waypoint_file: Optional[str] = None
    regions: Tuple[Tuple[float, float, float, float], ...] = ()
    region_names: Tuple[str, ...] = ()
    title: str = ""
    vmin: float = 0.0
    vmax: float = 1.0


def load_value_csv(path):
    """Rows of the value schema as (x1, x2, q, layer, value) columns."""
    with open(path, newline="") as handle:
        reader = csv.DictReader(handle)
        columns = reader.fieldnames or []
        for needed in ("x1_center", "x2_center", "q", "layer", "value"):
            if needed not in columns:
                raise SchemaError(f"value CSV {path} is missing column {needed!r}")
        x1, x2, qs, layers, vals = [], [], [], [], []
        for row in reader:
            x1.append(float(row["x1_center"]))
            x2.append(float(row["x2_center"]))
            qs.append(row["q"])
            layers.append(row["layer"])
            vals.append(float(row["value"]))
    return (
        np.asarray(x1),
        np.asarray(x2),
        np.asarray(qs, dtype=object),
        np.asarray(layers, dtype=object),
        np.asarray(vals),
    )


def load_waypoint_file(path):
    """Waypoint coordinates, radius, and optional per-point values."""
    eps_w = None
    points: List[Tuple[float, float]] = []
    values: List[Optional[float]] = []
    section = None
    with open(path) as handle:
        for raw in handle:
            line = raw.strip()
            if not line:
                continue
            if line.startswith("eps_w"):
                eps_w = float(line.split()[1])
                continue
            if line in ("points", "edges"):
                section = line
                continue
            if section == "points":
                parts = line.split()
                points.append((float(parts[1]), float(parts[2])))
                values.append(float(parts[4]) if len(parts) > 4 else None)
    if eps_w is None:
        raise SchemaError(f"waypoint file {path} has no eps_w header")
    return eps_w, np.asarray(points, dtype=float), values


def _select(spec: PlotSpec):
    x1, x2, qs, layers, vals = load_value_csv(spec.values_csv)
    mask = np.ones(x1.size, dtype=bool)
    if spec.q is not None:
        mask &= qs == str(spec.q)
    if spec.layer is not None:
        mask &= layers == str(spec.layer)
    if not np.any(mask):
        raise SelectorError(
            f"no rows match q={spec.q!r} layer={spec.layer!r} in {spec.values_csv}"
        )
    return x1[mask], x2[mask], vals[mask]


def render_heatmap(spec: PlotSpec) -> str:
    """Render the selected value field; returns the written image path."""
    x1, x2, vals = _select(spec)
    xs = np.unique(x1)
    ys = np.unique(x2)
    grid = np.full((xs.size, ys.size), np.nan)
    ix = np.searchsorted(xs, x1)
    iy = np.searchsorted(ys, x2)
    grid[ix, iy] = vals
    fig, ax = plt.subplots(figsize=FIGSIZE, dpi=DPI)
    if xs.size > 1 and ys.size > 1:
        extent = (
            float(1.5 * xs[0] - 0.5 * xs[1]),
            float(1.5 * xs[-1] - 0.5 * xs[-2]),
            float(1.5 * ys[0] - 0.5 * ys[1]),
            float(1.5 * ys[-1] - 0.5 * ys[-2]),
        )
    else:
        extent = (xs[0] - 0.5, xs[0] + 0.5, ys[0] - 0.5, ys[0] + 0.5)
    image = ax.imshow(
        grid.T,
        origin="lower",
        extent=extent,
        cmap=COLORMAP,
        vmin=spec.vmin,
        vmax=spec.vmax,
        interpolation="nearest",
        aspect="auto",
    )
    if spec.waypoint_file:
        eps_w, points, wvals = load_waypoint_file(spec.waypoint_file)
        cmap = plt.get_cmap(COLORMAP)
        for k in range(points.shape[0]):
            value = wvals[k] if wvals[k] is not None else 0.0
            span = max(spec.vmax - spec.vmin, 1e-12)
            color = cmap((value - spec.vmin) / span)
            ax.add_patch(
                Circle(
                    points[k],
                    radius=eps_w,
                    facecolor=color,
                    edgecolor="black",
                    linewidth=0.4,
                    alpha=0.85,
                )
            )
    for k, (x1lo, x1hi, x2lo, x2hi) in enumerate(spec.regions):
        ax.add_patch(
            Rectangle(
                (x1lo, x2lo),
                x1hi - x1lo,
                x2hi - x2lo,
                fill=False,
                edgecolor="black",
                linewidth=1.2,
            )
        )
        if k < len(spec.region_names):
            ax.annotate(
                spec.region_names[k],
                (x1lo, x2hi),
                fontsize=8,
                va="bottom",
            )
    ax.set_xlabel("x1")
    ax.set_ylabel("x2")
    if spec.title:
        ax.set_title(spec.title)
    fig.colorbar(image, ax=ax, label="satisfaction probability lower bound")
    out = Path(spec.output_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, metadata={"Software": None} if out.suffix == ".png" else None)
    plt.close(fig)
    return str(out)
