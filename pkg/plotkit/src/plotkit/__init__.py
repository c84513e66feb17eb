"""Rendering for layersynth artifacts: value heatmaps and waypoint overlays."""

from .heatmap import (
    PlotSpec,
    SchemaError,
    SelectorError,
    load_value_csv,
    load_waypoint_file,
    render_heatmap,
)

__version__ = "0.1.0"

__all__ = [
    "PlotSpec",
    "SchemaError",
    "SelectorError",
    "load_value_csv",
    "load_waypoint_file",
    "render_heatmap",
    "__version__",
]
