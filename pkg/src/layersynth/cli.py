"""Command-line pipeline: quantify, abstract, waypoints, synthesize, simulate.

Each verb runs its stage against one run file and persists artifacts in the
output directory; ``all`` chains every stage the mode demands and writes a
machine-readable manifest that reproduces the run byte for byte. Stage
failures surface the stage name and keep earlier artifacts.
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .config import RunConfig, load_config
from .dp import NO_TARGET, SynthesisResult, synthesize
from .errors import LayersynthError
from .grid import build_grid, transition_factors
from .refine import RefinedController, monte_carlo, simulate_trace, write_trace_csv
from .simrel import layer_matrix, weighting_matrix
from .waypoints import build_waypoint_model, epsilon_w


def _fmt(value: float) -> str:
    return f"{value:.9g}"


def _write_csv(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="") as handle:
        handle.write(",".join(header) + "\n")
        for row in rows:
            handle.write(",".join(row) + "\n")


def _value_rows(grid, values_db, layer_names):
    reps = grid.reps_array()
    n_cells, n_q, n_layers = values_db.shape
    for layer in range(n_layers):
        for q in range(n_q):
            col = values_db[:, q, layer]
            for c in range(n_cells):
                yield tuple(_fmt(v) for v in reps[c]) + (
                    str(q),
                    layer_names[layer],
                    _fmt(col[c]),
                )


def write_db_values_csv(path: Path, grid, values_db) -> None:
    dim = grid.dim
    header = [f"x{d + 1}_center" for d in range(dim)] + ["q", "layer", "value"]
    names = [str(i + 1) for i in range(values_db.shape[2])]
    _write_csv(path, header, _value_rows(grid, values_db, names))


def write_df_values_csv(path: Path, waypoints, values_df) -> None:
    dim = waypoints.points.shape[1]
    header = [f"x{d + 1}_center" for d in range(dim)] + ["q", "layer", "value"]
    rows = []
    n_w, n_q = values_df.shape
    for q in range(n_q):
        for w in range(n_w):
            rows.append(
                tuple(_fmt(v) for v in waypoints.points[w])
                + (str(q), "df", _fmt(values_df[w, q]))
            )
    _write_csv(path, header, rows)


def write_rfield_csv(path: Path, coords, qbar0, rvals, layer_name) -> None:
    dim = coords.shape[1]
    header = [f"x{d + 1}_center" for d in range(dim)] + ["q", "layer", "value"]
    rows = [
        tuple(_fmt(v) for v in coords[k])
        + (str(int(qbar0[k])), layer_name, _fmt(rvals[k]))
        for k in range(coords.shape[0])
    ]
    _write_csv(path, header, rows)


def write_db_policy_csv(path: Path, grid, policy) -> None:
    dim = grid.dim
    header = [f"x{d + 1}_center" for d in range(dim)] + [
        "q",
        "layer",
        "input_index",
        "switch_target",
    ]
    reps = grid.reps_array()
    rows = []
    n_cells, n_q, n_layers = policy.input_idx.shape
    for layer in range(n_layers):
        for q in range(n_q):
            for c in range(n_cells):
                if policy.bf_target is not None and policy.bf_target[c, q, layer] != NO_TARGET:
                    switch = f"df:{int(policy.bf_target[c, q, layer])}"
                else:
                    switch = str(int(policy.switch_layer[c, q, layer]) + 1)
                rows.append(
                    tuple(_fmt(v) for v in reps[c])
                    + (str(q), str(layer + 1), str(int(policy.input_idx[c, q, layer])), switch)
                )
    _write_csv(path, header, rows)


def write_df_policy_csv(path: Path, waypoints, policy) -> None:
    dim = waypoints.points.shape[1]
    header = [f"x{d + 1}_center" for d in range(dim)] + [
        "q",
        "layer",
        "waypoint_target",
        "switch_target",
    ]
    rows = []
    n_w, n_q = policy.df_succ.shape
    for q in range(n_q):
        for w in range(n_w):
            if policy.df_fb_layer is not None and policy.df_fb_layer[w, q] != NO_TARGET:
                switch = f"db:{int(policy.df_fb_layer[w, q]) + 1}"
            else:
                switch = "df"
            rows.append(
                tuple(_fmt(v) for v in waypoints.points[w])
                + (str(q), "df", str(int(policy.df_succ[w, q])), switch)
            )
    _write_csv(path, header, rows)


def write_waypoints_file(path: Path, waypoints, rfield_df=None) -> None:
    with open(path, "w") as handle:
        handle.write(f"eps_w {_fmt(waypoints.eps_w)}\n")
        handle.write(f"d_w {_fmt(waypoints.d_w)}\n")
        handle.write(f"n_s {waypoints.n_s}\n")
        handle.write(f"delta_w {_fmt(waypoints.delta_w)}\n")
        handle.write(f"count {waypoints.n_waypoints}\n")
        handle.write("points\n")
        for idx in range(waypoints.n_waypoints):
            coords = " ".join(_fmt(v) for v in waypoints.points[idx])
            value = "" if rfield_df is None else f" {_fmt(rfield_df[idx])}"
            handle.write(f"{idx} {coords} {int(waypoints.letters[idx])}{value}\n")
        handle.write("edges\n")
        for src, dst in waypoints.edge_list:
            handle.write(f"{src} {dst}\n")


def _artifact_dir(config: RunConfig, out_flag: Optional[str]) -> Path:
    out = out_flag or config.output_dir or f"out-{config.name}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def stage_quantify(config: RunConfig, out: Path) -> List[str]:
    artifacts = []
    settings = config.settings
    if settings.counts is not None:
        box = settings.grid_box if settings.grid_box is not None else config.model.state_box
        grid = build_grid(
            config.model, box, settings.counts, settings.input_counts,
            settings.beta_policy,
        )
        d_mat = weighting_matrix(config.model.C)
        layers = layer_matrix(
            config.model, d_mat, np.asarray(settings.eps), grid.beta_box,
            gain=settings.gain,
        )
        report = out / "layerspec.txt"
        report.write_text(layers.report() + "\n")
        artifacts.append(str(report))
    if settings.waypoint is not None:
        wp = settings.waypoint
        eps = epsilon_w(config.model, wp.K, wp.d_w, wp.delta_w)
        report = out / "waypoint_quantification.txt"
        report.write_text(
            f"eps_w {_fmt(eps)}\ndelta_w {_fmt(wp.delta_w)}\nn_s {wp.n_s}\n"
        )
        artifacts.append(str(report))
    return artifacts


def stage_abstract(config: RunConfig, out: Path) -> List[str]:
    settings = config.settings
    if settings.counts is None:
        return []
    box = settings.grid_box if settings.grid_box is not None else config.model.state_box
    grid = build_grid(
        config.model, box, settings.counts, settings.input_counts, settings.beta_policy
    )
    transition_factors(grid, config.model, dense_fallback=settings.dense_fallback)
    summary = out / "abstraction_summary.txt"
    summary.write_text(grid.summary() + "\n")
    return [str(summary)]


def stage_waypoints(config: RunConfig, out: Path) -> List[str]:
    settings = config.settings
    if settings.waypoint is None:
        return []
    wp = settings.waypoint
    from .errors import PartialModelError

    try:
        model_w = build_waypoint_model(
            config.model, config.labels, wp.sample_count, wp.n_s, wp.delta_w,
            wp.K, wp.d_w, wp.seed, augment_rounds=wp.augment_rounds,
        )
    except PartialModelError as exc:
        if not wp.allow_partial or exc.partial_model is None:
            raise
        model_w = exc.partial_model
    path = out / "waypoints.txt"
    write_waypoints_file(path, model_w)
    return [str(path)]


def stage_synthesize(config: RunConfig, out: Path) -> (List[str], SynthesisResult):
    result = synthesize(config.model, config.dfa, config.labels, config.settings)
    artifacts = []
    if result.layers is not None:
        path = out / "layerspec.txt"
        path.write_text(result.layers.report() + "\n")
        artifacts.append(str(path))
    if result.grid is not None:
        path = out / "abstraction_summary.txt"
        path.write_text(result.grid.summary() + "\n")
        artifacts.append(str(path))
        path = out / "values_db.csv"
        write_db_values_csv(path, result.grid, result.values.db)
        artifacts.append(str(path))
        path = out / "rfield_db.csv"
        write_rfield_csv(
            path, result.grid.reps_array(), result.qbar0_db, result.rfield_db, "R"
        )
        artifacts.append(str(path))
        path = out / "policy_db.csv"
        write_db_policy_csv(path, result.grid, result.policy)
        artifacts.append(str(path))
    if result.waypoints is not None:
        path = out / "values_df.csv"
        write_df_values_csv(path, result.waypoints, result.values.df)
        artifacts.append(str(path))
        path = out / "rfield_df.csv"
        write_rfield_csv(
            path, result.waypoints.points, result.qbar0_df, result.rfield_df, "R"
        )
        artifacts.append(str(path))
        path = out / "policy_df.csv"
        write_df_policy_csv(path, result.waypoints, result.policy)
        artifacts.append(str(path))
        path = out / "waypoints.txt"
        write_waypoints_file(path, result.waypoints, result.rfield_df)
        artifacts.append(str(path))
    if result.warnings:
        path = out / "warnings.txt"
        path.write_text("\n".join(result.warnings) + "\n")
        artifacts.append(str(path))
    conv = out / "convergence.txt"
    conv.write_text(
        f"iterations {result.values.iteration}\n"
        f"converged {result.values.converged}\n"
        f"residual {_fmt(result.values.residual)}\n"
        f"min_increment {_fmt(min(result.values.min_increments) if result.values.min_increments else 0.0)}\n"
        f"r_initial {_fmt(result.r_initial)}\n"
    )
    artifacts.append(str(conv))
    return artifacts, result


def stage_simulate(
    config: RunConfig, out: Path, result: Optional[SynthesisResult] = None
) -> List[str]:
    if result is None:
        _, result = stage_synthesize(config, out)
    x0_list = config.validation_x0 or [config.model.x0]

    def run_one(k_x0):
        k, x0 = k_x0
        controller = RefinedController(config.model, config.dfa, config.labels, result)
        certified = _certified_at(result, config, x0)
        p_hat, half = monte_carlo(
            config.model,
            controller,
            config.dfa,
            config.labels,
            x0,
            config.validation_runs,
            config.validation_horizon,
            config.validation_seed + k,
        )
        return certified, p_hat, half

    jobs = list(enumerate(x0_list))
    if config.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            outcomes = list(pool.map(run_one, jobs))
    else:
        outcomes = [run_one(job) for job in jobs]
    rows = []
    for (k, x0), (certified, p_hat, half) in zip(jobs, outcomes):
        se = half / 1.96
        rows.append(
            tuple(_fmt(v) for v in np.asarray(x0, dtype=float))
            + (
                _fmt(certified),
                _fmt(p_hat),
                _fmt(half),
                str(config.validation_runs),
                str(int(p_hat + 3.0 * se >= certified - 1e-12)),
            )
        )
    dim = len(np.asarray(x0_list[0]).reshape(-1))
    header = [f"x{d + 1}" for d in range(dim)] + [
        "certified",
        "empirical",
        "half_width_95",
        "runs",
        "sound",
    ]
    path = out / "validation.csv"
    _write_csv(path, header, rows)
    artifacts = [str(path)]
    controller = RefinedController(config.model, config.dfa, config.labels, result)
    trace = simulate_trace(
        config.model,
        controller,
        config.dfa,
        config.labels,
        x0_list[0],
        config.validation_horizon,
        np.random.default_rng(config.validation_seed),
    )
    trace_path = out / "trace_sample.csv"
    write_trace_csv(trace_path, trace, config.model, config.labels)
    artifacts.append(str(trace_path))
    return artifacts


def _certified_at(result: SynthesisResult, config: RunConfig, x0) -> float:
    """Certified lower bound at a concrete initial state."""
    from .grid import project

    x0 = np.asarray(x0, dtype=float)
    best = 0.0
    if result.grid is not None:
        cell = project(result.grid, x0)
        if cell != result.grid.sink_index:
            best = max(best, float(result.rfield_db[cell]))
    if result.waypoints is not None:
        for w in result.waypoints.containing(x0):
            best = max(best, float(result.rfield_df[w]))
    return best


def run_all(config: RunConfig, out: Path) -> Dict:
    """Full pipeline with per-stage wall times and a reproducible manifest."""
    manifest: Dict = {
        "config": config.raw,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seeds": {
            "waypoints": config.settings.waypoint.seed if config.settings.waypoint else None,
            "validation": config.validation_seed,
        },
        "wall_times": {},
        "artifacts": [],
    }
    result = None
    for stage in ("quantify", "abstract", "waypoints", "synthesize", "simulate"):
        start = time.perf_counter()
        if stage == "quantify":
            artifacts = stage_quantify(config, out)
        elif stage == "abstract":
            artifacts = stage_abstract(config, out)
        elif stage == "waypoints":
            artifacts = stage_waypoints(config, out)
        elif stage == "synthesize":
            artifacts, result = stage_synthesize(config, out)
        else:
            artifacts = stage_simulate(config, out, result)
        manifest["wall_times"][stage] = time.perf_counter() - start
        manifest["artifacts"].extend(artifacts)
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return manifest


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="layersynth",
        description="Layered abstraction-based controller synthesis pipeline",
    )
    parser.add_argument(
        "verb",
        choices=["quantify", "abstract", "waypoints", "synthesize", "simulate", "all"],
    )
    parser.add_argument("--config", required=True, help="run file (YAML) or manifest")
    parser.add_argument("--out", default=None, help="artifact directory")
    parser.add_argument("--threads", type=int, default=1, help="worker cap")
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, threads=args.threads)
        out = _artifact_dir(config, args.out)
        if args.verb == "all":
            run_all(config, out)
        elif args.verb == "quantify":
            stage_quantify(config, out)
        elif args.verb == "abstract":
            stage_abstract(config, out)
        elif args.verb == "waypoints":
            stage_waypoints(config, out)
        elif args.verb == "synthesize":
            stage_synthesize(config, out)
        else:
            stage_simulate(config, out)
    except (LayersynthError, OSError) as exc:
        print(f"stage {args.verb} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
