"""Run configuration: YAML ingestion, validation, and settings assembly.

A run file is one YAML document with model, labels, spec, and per-stage
blocks. An emitted run manifest (JSON with the normalized configuration under
"config") is accepted in place of a fresh file, which makes re-runs
reproducible byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import yaml

from .dfa import Dfa, read_dfa, to_dfa
from .dp import SynthesisSettings, WaypointSettings
from .errors import ConfigurationError
from .geometry import Box
from .model import LabelMap, LtiGmdp, Region
from .scltl import contains_next, parse_scltl

MODES = ("db-single", "db-multilayer", "df-only", "heterogeneous")


@dataclass
class RunConfig:
    """Validated, normalized run description."""

    name: str
    mode: str
    raw: Dict
    model: LtiGmdp
    labels: LabelMap
    dfa: Dfa
    formula: Optional[str]
    formula_has_next: bool
    settings: SynthesisSettings
    validation_runs: int
    validation_horizon: int
    validation_seed: int
    validation_x0: List[np.ndarray]
    output_dir: Optional[str]
    threads: int = 1


def _require(block: Dict, key: str, context: str):
    if key not in block:
        raise ConfigurationError(f"missing key {key!r} in {context}")
    return block[key]


def _finite_array(value, context: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"non-finite numerics in {context}: {value!r}")
    return arr


def _box(value, context: str) -> Box:
    arr = _finite_array(value, context)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigurationError(f"{context} must be a list of [low, high] pairs")
    try:
        return Box.from_pairs(arr)
    except ValueError as exc:
        raise ConfigurationError(f"invalid {context}: {exc}") from exc


def _build_model(block: Dict) -> LtiGmdp:
    return LtiGmdp(
        A=_finite_array(_require(block, "A", "model"), "model.A"),
        B=_finite_array(_require(block, "B", "model"), "model.B"),
        Bw=_finite_array(_require(block, "Bw", "model"), "model.Bw"),
        C=_finite_array(_require(block, "C", "model"), "model.C"),
        state_box=_box(_require(block, "state_box", "model"), "model.state_box"),
        input_box=_box(_require(block, "input_box", "model"), "model.input_box"),
        x0=_finite_array(_require(block, "x0", "model"), "model.x0"),
        noise_mean=(
            _finite_array(block["noise_mean"], "model.noise_mean")
            if "noise_mean" in block
            else None
        ),
        noise_cov=(
            _finite_array(block["noise_cov"], "model.noise_cov")
            if "noise_cov" in block
            else None
        ),
    )


def _build_labels(entries) -> LabelMap:
    regions = []
    for k, entry in enumerate(entries or []):
        prop = _require(entry, "proposition", f"labels[{k}]")
        box = _box(_require(entry, "box", f"labels[{k}]"), f"labels[{k}].box")
        regions.append(Region(box=box, proposition=str(prop)))
    return LabelMap(regions=tuple(regions))


def load_config(path, threads: int = 1) -> RunConfig:
    """Parse and validate a YAML run file or an emitted JSON manifest."""
    text = Path(path).read_text()
    data = None
    try:
        as_json = json.loads(text)
        if isinstance(as_json, dict) and "config" in as_json:
            data = as_json["config"]
        elif isinstance(as_json, dict):
            data = as_json
    except json.JSONDecodeError:
        pass
    if data is None:
        data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigurationError(f"run file {path} did not parse to a mapping")
    return config_from_dict(data, threads=threads)


def config_from_dict(data: Dict, threads: int = 1) -> RunConfig:
    mode = str(_require(data, "mode", "run config"))
    if mode not in MODES:
        raise ConfigurationError(f"unknown mode {mode!r}; pick one of {MODES}")
    name = str(data.get("name", "run"))
    model = _build_model(_require(data, "model", "run config"))
    labels = _build_labels(data.get("labels", []))
    spec_block = _require(data, "spec", "run config")
    formula = spec_block.get("formula")
    formula_has_next = False
    if formula is not None:
        ast = parse_scltl(str(formula), labels.propositions)
        formula_has_next = contains_next(ast)
        dfa = to_dfa(ast, labels.propositions)
    elif "dfa_file" in spec_block:
        with open(spec_block["dfa_file"]) as handle:
            dfa = read_dfa(handle)
        if tuple(dfa.props) != labels.propositions:
            raise ConfigurationError(
                f"DFA propositions {dfa.props} do not match the label map "
                f"{labels.propositions}"
            )
    else:
        raise ConfigurationError("spec block needs a formula or a dfa_file")
    uses_grid = mode in ("db-single", "db-multilayer", "heterogeneous")
    uses_waypoints = mode in ("df-only", "heterogeneous")
    if uses_waypoints and formula_has_next:
        raise ConfigurationError(
            "formulas containing the next operator X cannot be synthesized "
            "against a waypoint layer"
        )

    grid_box = None
    counts = None
    input_counts = None
    surrogate_counts = None
    beta_policy = "half"
    eps: Tuple[float, ...] = ()
    delta_override = None
    if uses_grid:
        grid_block = _require(data, "grid", f"mode {mode}")
        counts = [int(v) for v in _require(grid_block, "counts", "grid")]
        input_counts = [int(v) for v in _require(grid_block, "input_counts", "grid")]
        if "sub_box" in grid_block:
            grid_box = _box(grid_block["sub_box"], "grid.sub_box")
        beta_policy = str(grid_block.get("beta_policy", "half"))
        if beta_policy not in ("half", "paper-compat"):
            raise ConfigurationError(f"unknown beta policy {beta_policy!r}")
        if "surrogate_counts" in grid_block:
            surrogate_counts = [int(v) for v in grid_block["surrogate_counts"]]
        layers_block = _require(data, "layers", f"mode {mode}")
        eps = tuple(float(v) for v in _require(layers_block, "eps", "layers"))
        if mode == "db-single" and len(eps) != 1:
            raise ConfigurationError(
                f"mode db-single takes exactly one precision, got {len(eps)}"
            )
        if mode == "db-multilayer" and len(eps) < 2:
            raise ConfigurationError("mode db-multilayer needs at least two precisions")
        if mode == "db-multilayer" and surrogate_counts is None:
            raise ConfigurationError("mode db-multilayer needs grid.surrogate_counts")
        if "delta_override" in layers_block:
            delta_override = _finite_array(
                layers_block["delta_override"], "layers.delta_override"
            )
            if delta_override.shape != (len(eps), len(eps)):
                raise ConfigurationError(
                    "layers.delta_override must be square matching the eps list"
                )

    waypoint = None
    if uses_waypoints:
        wp_block = _require(data, "waypoints", f"mode {mode}")
        waypoint = WaypointSettings(
            sample_count=int(_require(wp_block, "sample_count", "waypoints")),
            n_s=int(_require(wp_block, "n_s", "waypoints")),
            delta_w=float(_require(wp_block, "delta_w", "waypoints")),
            K=_finite_array(_require(wp_block, "K", "waypoints"), "waypoints.K"),
            d_w=float(wp_block.get("d_w", 1.0)),
            seed=int(wp_block.get("seed", 0)),
            allow_partial=bool(wp_block.get("allow_partial", False)),
            augment_rounds=int(wp_block.get("augment_rounds", 10)),
        )

    dp_block = data.get("dp", {})
    partial_masks = []
    for entry in dp_block.get("partial", []) or []:
        layer_idx = int(_require(entry, "layer", "dp.partial")) - 1
        keep_box = _box(_require(entry, "keep_box", "dp.partial"), "dp.partial.keep_box")
        partial_masks.append((layer_idx, keep_box))

    settings = SynthesisSettings(
        mode=mode,
        eps=eps,
        grid_box=grid_box,
        counts=counts,
        input_counts=input_counts,
        surrogate_counts=surrogate_counts,
        beta_policy=beta_policy,
        delta_override=delta_override,
        gain=None,
        waypoint=waypoint,
        tol=float(dp_block.get("tolerance", 1e-6)),
        max_iterations=int(dp_block.get("max_iterations", 5000)),
        partial_masks=tuple(partial_masks),
        dense_fallback=bool(dp_block.get("dense_fallback", False)),
        strategy_stay_option=bool(dp_block.get("strategy_stay_option", True)),
        formula_has_next=formula_has_next,
    )

    val_block = data.get("validation", {})
    x0_list = [
        _finite_array(v, "validation.x0_list") for v in val_block.get("x0_list", [])
    ]
    return RunConfig(
        name=name,
        mode=mode,
        raw=data,
        model=model,
        labels=labels,
        dfa=dfa,
        formula=str(formula) if formula is not None else None,
        formula_has_next=formula_has_next,
        settings=settings,
        validation_runs=int(val_block.get("runs", 2000)),
        validation_horizon=int(
            val_block.get("horizon", 10 * dfa.n_states * max(counts or [20]))
        ),
        validation_seed=int(val_block.get("seed", 0)),
        validation_x0=x0_list,
        output_dir=data.get("output_dir"),
        threads=threads,
    )
