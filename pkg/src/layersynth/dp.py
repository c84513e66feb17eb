"""Robust dynamic programming over layered abstractions.

The discretization-based backup takes an expectation over the factorized (or
dense) kernel of the worst-case DFA progress within the output-deviation
ellipsoid, subtracts the layer-switch deviation, and clamps to [0, 1]. The
discretization-free backup is deterministic per edge. Heterogeneous sweeps
couple the two through the switch sets of the covering conditions. All sweeps
are synchronous: each iteration reads the previous value arrays and writes
fresh ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .dfa import Dfa
from .errors import ConfigurationError, ContractError, PartialModelError
from .geometry import Box
from .grid import GridAbstraction, build_grid, transition_factors
from .model import LabelMap, LtiGmdp
from .qeps import QepsTable
from .simrel import LayerSpec, layer_matrix, weighting_matrix
from .waypoints import WaypointModel, build_waypoint_model

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 5000

NO_TARGET = -1

MODES = ("db-single", "db-multilayer", "df-only", "heterogeneous")


@dataclass
class ValueField:
    """Converged (or best-so-far) values for both abstraction families."""

    db: Optional[np.ndarray] = None  # (n_cells, n_q, n_layers)
    df: Optional[np.ndarray] = None  # (n_waypoints, n_q)
    iteration: int = 0
    converged: bool = False
    residual: float = float("inf")
    min_increments: List[float] = field(default_factory=list)

    def copy(self) -> "ValueField":
        return ValueField(
            db=None if self.db is None else self.db.copy(),
            df=None if self.df is None else self.df.copy(),
            iteration=self.iteration,
            converged=self.converged,
            residual=self.residual,
            min_increments=list(self.min_increments),
        )


@dataclass
class Policy:
    """Argmax decisions per abstract state, deterministic under ties."""

    input_idx: Optional[np.ndarray] = None  # (n_cells, n_q, n_layers) int32
    switch_layer: Optional[np.ndarray] = None  # target layer j per (c, q, i)
    bf_target: Optional[np.ndarray] = None  # waypoint or NO_TARGET per (c, q, i)
    df_succ: Optional[np.ndarray] = None  # successor waypoint per (w, q)
    df_fb_layer: Optional[np.ndarray] = None  # DB layer to switch into, or NO_TARGET


@dataclass(frozen=True)
class SwitchSets:
    """Covering conditions between the gridded and waypoint layers.

    ``bf_cells_per_wp[i][w]`` holds the cells whose layer-i relation ellipsoid
    fits inside waypoint w's ellipsoid; ``fb_cells[i][w]`` holds the covering
    cell set of waypoint w (empty when the covering conditions fail).
    """

    bf_cells_per_wp: Tuple[Tuple[np.ndarray, ...], ...]
    fb_cells: Tuple[Tuple[np.ndarray, ...], ...]

    def bf_map(self, cell: int, layer: int = 0) -> Tuple[int, ...]:
        return tuple(
            int(w)
            for w, cells in enumerate(self.bf_cells_per_wp[layer])
            if cell in cells
        )

    def fb_map(self, waypoint: int, layer: int = 0) -> np.ndarray:
        return self.fb_cells[layer][waypoint]


def compute_switch_sets(
    abstraction: GridAbstraction,
    waypoints: WaypointModel,
    layers: LayerSpec,
    eps_w: Optional[float] = None,
    d_w: Optional[float] = None,
    rep_letters: Optional[np.ndarray] = None,
) -> SwitchSets:
    """Conditions for switching between the grid and the waypoint graph.

    A grid-to-waypoint switch needs the relation ellipsoid inside the waypoint
    ellipsoid; a waypoint-to-grid switch needs the waypoint ellipsoid covered
    by cells whose in-cell deviation stays within the relation precision.
    Coverings whose cells disagree with the waypoint letter are rejected.
    """
    eps_w = waypoints.eps_w if eps_w is None else float(eps_w)
    d_w = waypoints.d_w if d_w is None else float(d_w)
    d_diag = np.diag(layers.D)
    if not np.allclose(layers.D, np.diag(d_diag)):
        d_min = float(np.min(np.linalg.eigvalsh(layers.D)))
        d_for_half = float(np.max(np.linalg.eigvalsh(layers.D)))
    else:
        d_min = float(np.min(d_diag))
        d_for_half = None
    reps = abstraction.reps_array()
    dists = np.sqrt(d_w * np.sum((reps[:, None, :] - waypoints.points[None, :, :]) ** 2, axis=2))
    bf_all = []
    fb_all = []
    n_w = waypoints.n_waypoints
    grid_box = abstraction.box
    semi_state = eps_w / np.sqrt(d_w)
    for i in range(layers.n_layers):
        eps_i = float(layers.eps[i])
        scale = np.sqrt(d_w / d_min)
        hit = dists + eps_i * scale <= eps_w
        bf_cells = tuple(np.nonzero(hit[:, w])[0] for w in range(n_w))
        if d_for_half is None:
            half_diag = abstraction.max_rep_distance(d_diag)
        else:
            half_diag = abstraction.max_rep_distance(np.full(abstraction.dim, d_for_half))
        fb_rows = []
        for w in range(n_w):
            center = waypoints.points[w]
            inside = bool(
                np.all(center - semi_state >= grid_box.lows)
                and np.all(center + semi_state <= grid_box.highs)
            )
            if not inside or half_diag > eps_i:
                fb_rows.append(np.empty(0, dtype=np.int64))
                continue
            gap = np.maximum(0.0, np.abs(reps - center) - 0.5 * abstraction.widths)
            touch = np.sum((gap / semi_state) ** 2, axis=1) <= 1.0
            cells = np.nonzero(touch)[0]
            if rep_letters is not None and cells.size:
                if not np.all(rep_letters[cells] == waypoints.letters[w]):
                    cells = np.empty(0, dtype=np.int64)
            fb_rows.append(cells)
        bf_all.append(bf_cells)
        fb_all.append(tuple(fb_rows))
    return SwitchSets(bf_cells_per_wp=tuple(bf_all), fb_cells=tuple(fb_all))


class DbDpContext:
    """Vectorized discretization-based sweeps over one grid."""

    def __init__(
        self,
        grid: GridAbstraction,
        kernel,
        qeps: QepsTable,
        layers: LayerSpec,
        dfa: Dfa,
        strategy: Optional[np.ndarray] = None,
        stay_option: bool = False,
        active: Optional[np.ndarray] = None,
    ):
        self.grid = grid
        self.kernel = kernel
        self.qeps = qeps
        self.layers = layers
        self.dfa = dfa
        self.acc = dfa.accepting_mask()
        self.n_q = dfa.n_states
        self.n_layers = layers.n_layers
        self.strategy = strategy
        self.stay_option = stay_option
        self.active = active  # (n_cells, n_layers) bool, False entries frozen at 0

    def zero_values(self) -> np.ndarray:
        return np.zeros((self.grid.n_cells, self.n_q, self.n_layers))

    def maximized_expectations(self, v_db: np.ndarray, want_argmax: bool = False):
        """M[q, j, c]: best expected worst-case continuation over inputs."""
        n_cells = self.grid.n_cells
        m_out = np.empty((self.n_q, self.n_layers, n_cells))
        arg = (
            np.empty((self.n_q, self.n_layers, n_cells), dtype=np.int32)
            if want_argmax
            else None
        )
        for j in range(self.n_layers):
            for q in range(self.n_q):
                w = self.qeps.w_min(q, j, v_db[:, :, j], self.acc)
                expect = self.kernel.expectation(w)
                m_out[q, j] = expect.max(axis=1)
                if want_argmax:
                    arg[q, j] = expect.argmax(axis=1)
        return m_out, arg

    def _combine(self, m_out: np.ndarray) -> np.ndarray:
        """Apply switch deviations and the configured switch actions."""
        n_cells = m_out.shape[2]
        v_new = np.empty((n_cells, self.n_q, self.n_layers))
        delta = self.layers.delta
        cells = np.arange(n_cells)
        for i in range(self.n_layers):
            for q in range(self.n_q):
                if self.strategy is None:
                    best = np.clip(m_out[q, 0] - delta[i, 0], 0.0, 1.0)
                    for j in range(1, self.n_layers):
                        cand = np.clip(m_out[q, j] - delta[i, j], 0.0, 1.0)
                        best = np.maximum(best, cand)
                else:
                    j_cells = self.strategy[:, q, i]
                    best = np.clip(m_out[q, j_cells, cells] - delta[i, j_cells], 0.0, 1.0)
                    if self.stay_option:
                        stay = np.clip(m_out[q, i] - delta[i, i], 0.0, 1.0)
                        best = np.maximum(best, stay)
                v_new[:, q, i] = best
        if self.active is not None:
            for i in range(self.n_layers):
                v_new[~self.active[:, i], :, i] = 0.0
        return v_new

    def sweep(self, v_db: np.ndarray) -> np.ndarray:
        m_out, _ = self.maximized_expectations(v_db)
        return self._combine(m_out)

    def extract_policy(self, v_db: np.ndarray):
        """Argmax decisions at the fixed point; lowest input then lowest layer."""
        m_out, arg = self.maximized_expectations(v_db, want_argmax=True)
        n_cells = self.grid.n_cells
        input_idx = np.full((n_cells, self.n_q, self.n_layers), NO_TARGET, dtype=np.int32)
        switch_layer = np.zeros((n_cells, self.n_q, self.n_layers), dtype=np.int8)
        delta = self.layers.delta
        cells = np.arange(n_cells)
        for i in range(self.n_layers):
            for q in range(self.n_q):
                if self.strategy is None:
                    allowed = list(range(self.n_layers))
                else:
                    allowed = None
                if allowed is not None:
                    best_val = np.full(n_cells, -np.inf)
                    best_j = np.zeros(n_cells, dtype=np.int8)
                    for j in allowed:
                        cand = np.clip(m_out[q, j] - delta[i, j], 0.0, 1.0)
                        better = cand > best_val + 1e-15
                        best_j[better] = j
                        best_val[better] = cand[better]
                    switch_layer[:, q, i] = best_j
                    input_idx[:, q, i] = arg[q, best_j, cells]
                else:
                    j_cells = self.strategy[:, q, i]
                    val_strat = np.clip(
                        m_out[q, j_cells, cells] - delta[i, j_cells], 0.0, 1.0
                    )
                    if self.stay_option:
                        val_stay = np.clip(m_out[q, i] - delta[i, i], 0.0, 1.0)
                        use_stay = val_stay > val_strat + 1e-15
                    else:
                        use_stay = np.zeros(n_cells, dtype=bool)
                    j_eff = np.where(use_stay, np.int8(i), j_cells.astype(np.int8))
                    switch_layer[:, q, i] = j_eff
                    input_idx[:, q, i] = arg[q, j_eff, cells]
        return input_idx, switch_layer, m_out


class DfDpContext:
    """Deterministic waypoint-graph sweeps with edge-wise DFA tracking."""

    def __init__(self, waypoints: WaypointModel, dfa: Dfa):
        self.waypoints = waypoints
        self.dfa = dfa
        self.acc = dfa.accepting_mask()
        self.n_q = dfa.n_states
        edges = waypoints.edge_list
        self.e_src = np.array([e[0] for e in edges], dtype=np.int64)
        self.e_dst = np.array([e[1] for e in edges], dtype=np.int64)
        n_e = len(edges)
        self.q_after = np.empty((n_e, self.n_q), dtype=np.int64)
        self.alive = np.ones((n_e, self.n_q), dtype=bool)
        trans = dfa.transitions
        for k, (src, dst) in enumerate(edges):
            l_src = int(waypoints.letters[src])
            l_dst = int(waypoints.letters[dst])
            for q in range(self.n_q):
                q_mid = int(trans[q, l_src])
                if dfa.sink is not None and q_mid == dfa.sink:
                    self.alive[k, q] = False
                    self.q_after[k, q] = q_mid
                else:
                    self.q_after[k, q] = int(trans[q_mid, l_dst])

    def zero_values(self) -> np.ndarray:
        return np.zeros((self.waypoints.n_waypoints, self.n_q))

    def edge_values(self, v_df: np.ndarray) -> np.ndarray:
        """Backup value of each (edge, q) pair."""
        acc_val = self.acc.astype(float)
        vals = np.empty((self.e_src.size, self.n_q))
        for q in range(self.n_q):
            qp = self.q_after[:, q]
            cont = np.maximum(acc_val[qp], v_df[self.e_dst, qp])
            vals[:, q] = np.where(
                self.alive[:, q],
                np.clip(cont - self.waypoints.delta_w, 0.0, 1.0),
                0.0,
            )
        return vals

    def sweep(self, v_df: np.ndarray) -> np.ndarray:
        v_new = np.zeros_like(v_df)
        if self.e_src.size == 0:
            return v_new
        vals = self.edge_values(v_df)
        for q in range(self.n_q):
            np.maximum.at(v_new[:, q], self.e_src, vals[:, q])
        return v_new

    def extract_policy(self, v_df: np.ndarray) -> np.ndarray:
        """Best successor per (waypoint, q); lowest destination wins ties."""
        succ = np.full((self.waypoints.n_waypoints, self.n_q), NO_TARGET, dtype=np.int32)
        if self.e_src.size == 0:
            return succ
        vals = self.edge_values(v_df)
        best = np.full((self.waypoints.n_waypoints, self.n_q), -np.inf)
        order = np.argsort(self.e_dst, kind="stable")
        for k in order:
            src = self.e_src[k]
            dst = self.e_dst[k]
            for q in range(self.n_q):
                if vals[k, q] > best[src, q] + 1e-15:
                    best[src, q] = vals[k, q]
                    succ[src, q] = dst
        return succ


def robust_backup_db(
    values: ValueField,
    abstraction: GridAbstraction,
    dfa: Dfa,
    layers: LayerSpec,
    qeps: QepsTable,
    cell: int,
    q: int,
    i: int,
    u_idx: int,
    j: int,
) -> float:
    """Single-entry robust backup: expectation of the worst-case continuation
    minus the switch deviation, clamped to [0, 1]. The sink contributes 0."""
    if abstraction.kernel is None:
        raise ContractError("abstraction kernel missing; run transition_factors first")
    if values.db is None:
        raise ContractError("no discretization-based values present")
    acc = dfa.accepting_mask()
    row = abstraction.kernel.row(cell, u_idx)
    w = qeps.w_min(q, j, values.db[:, :, j], acc)
    expect = float(row @ w)
    return float(np.clip(expect - layers.delta[i, j], 0.0, 1.0))


def robust_backup_df(
    values: ValueField,
    waypoints: WaypointModel,
    dfa: Dfa,
    x_w: int,
    q: int,
    x_w_next: int,
) -> float:
    """Deterministic edge backup with the DFA stepped through the traversed
    letter and then the arrival letter; a sink-bound traversal is worth 0."""
    if (x_w, x_w_next) not in set(waypoints.edge_list):
        raise ContractError(f"no edge {x_w} -> {x_w_next}")
    if values.df is None:
        raise ContractError("no waypoint values present")
    trans = dfa.transitions
    q_mid = int(trans[q, int(waypoints.letters[x_w])])
    if dfa.sink is not None and q_mid == dfa.sink:
        return 0.0
    q_after = int(trans[q_mid, int(waypoints.letters[x_w_next])])
    acc = 1.0 if dfa.is_accepting(q_after) else 0.0
    cont = max(acc, float(values.df[x_w_next, q_after]))
    return float(np.clip(cont - waypoints.delta_w, 0.0, 1.0))


def heterogeneous_sweep(
    values: ValueField,
    abstraction: GridAbstraction,
    waypoints: WaypointModel,
    dfa: Dfa,
    layers: LayerSpec,
    switch_sets: SwitchSets,
    db_ctx: Optional[DbDpContext] = None,
    df_ctx: Optional[DfDpContext] = None,
    model: Optional[LtiGmdp] = None,
    labels: Optional[LabelMap] = None,
) -> ValueField:
    """One synchronized heterogeneous iteration.

    Both families advance one backup; the waypoint values then take the
    worst-case covering cell as an alternative, and the grid values take the
    pre-combination waypoint values of an enclosing ellipsoid.
    """
    if db_ctx is None:
        if model is None or labels is None:
            raise ContractError("model and labels required to build the sweep contexts")
        qeps = QepsTable(abstraction, dfa, labels, model, layers.eps, layers.D)
        db_ctx = DbDpContext(abstraction, abstraction.kernel, qeps, layers, dfa)
    if df_ctx is None:
        df_ctx = DfDpContext(waypoints, dfa)
    v_db_next = db_ctx.sweep(values.db)
    v_df_next = df_ctx.sweep(values.df)
    v_df_out, v_db_out = _combine_heterogeneous(
        v_db_next, v_df_next, switch_sets, db_ctx.n_q, layers.n_layers
    )
    return ValueField(db=v_db_out, df=v_df_out, iteration=values.iteration + 1)


def _combine_heterogeneous(v_db_next, v_df_next, switch_sets, n_q, n_layers):
    n_w = v_df_next.shape[0]
    v_df_out = v_df_next.copy()
    for w in range(n_w):
        best_min = -np.inf
        for i in range(n_layers):
            cells = switch_sets.fb_cells[i][w]
            if cells.size == 0:
                continue
            cover = v_db_next[cells, :, i].min(axis=0)
            best_min = np.maximum(best_min, cover)
        if np.any(np.isfinite(best_min)):
            v_df_out[w] = np.maximum(v_df_out[w], np.where(np.isfinite(best_min), best_min, 0.0))
    v_db_out = v_db_next.copy()
    for i in range(n_layers):
        bf_best = np.full((v_db_next.shape[0], n_q), -np.inf)
        any_hit = np.zeros(v_db_next.shape[0], dtype=bool)
        for w in range(n_w):
            cells = switch_sets.bf_cells_per_wp[i][w]
            if cells.size == 0:
                continue
            any_hit[cells] = True
            bf_best[cells] = np.maximum(bf_best[cells], v_df_next[w])
        if np.any(any_hit):
            v_db_out[any_hit, :, i] = np.maximum(
                v_db_out[any_hit, :, i], bf_best[any_hit]
            )
    return v_df_out, v_db_out


def _bf_policy(v_db_next, v_df_next, switch_sets, n_q, n_layers):
    """Waypoint switch targets where entering the tube beats staying gridded."""
    n_cells = v_db_next.shape[0]
    bf_target = np.full((n_cells, n_q, n_layers), NO_TARGET, dtype=np.int32)
    for i in range(n_layers):
        best = np.full((n_cells, n_q), -np.inf)
        target = np.full((n_cells, n_q), NO_TARGET, dtype=np.int32)
        for w in range(v_df_next.shape[0]):
            cells = switch_sets.bf_cells_per_wp[i][w]
            if cells.size == 0:
                continue
            vals = np.broadcast_to(v_df_next[w], (cells.size, n_q))
            better = vals > best[cells] + 1e-15
            sub_target = target[cells]
            sub_best = best[cells]
            sub_target[better] = w
            sub_best[better] = vals[better]
            target[cells] = sub_target
            best[cells] = sub_best
        improve = best > v_db_next[:, :, i] + 1e-15
        bf_target[:, :, i][improve] = target[improve]
    return bf_target


def _fb_policy(v_db_next, v_df_next, df_succ, switch_sets, n_q, n_layers):
    """Layer markers where the covering-cell minimum beats the best edge."""
    n_w = v_df_next.shape[0]
    fb_layer = np.full((n_w, n_q), NO_TARGET, dtype=np.int8)
    for w in range(n_w):
        own = v_df_next[w].copy()
        for i in range(n_layers):
            cells = switch_sets.fb_cells[i][w]
            if cells.size == 0:
                continue
            cover = v_db_next[cells, :, i].min(axis=0)
            better = cover > own + 1e-15
            fb_layer[w][better] = i
            own = np.maximum(own, cover)
    return fb_layer


@dataclass
class WaypointSettings:
    sample_count: int
    n_s: int
    delta_w: float
    K: np.ndarray
    d_w: float = 1.0
    seed: int = 0
    allow_partial: bool = False
    augment_rounds: int = 10


@dataclass
class SynthesisSettings:
    """Everything ``synthesize`` needs beyond the model, DFA, and labels."""

    mode: str
    eps: Sequence[float] = ()
    grid_box: Optional[Box] = None
    counts: Optional[Sequence[int]] = None
    input_counts: Optional[Sequence[int]] = None
    surrogate_counts: Optional[Sequence[int]] = None
    beta_policy: str = "half"
    delta_override: Optional[np.ndarray] = None
    gain: Optional[np.ndarray] = None
    waypoint: Optional[WaypointSettings] = None
    tol: float = DEFAULT_TOL
    max_iterations: int = DEFAULT_MAX_ITER
    partial_masks: Sequence[Tuple[int, Box]] = ()
    dense_fallback: bool = False
    # keep staying in the current layer as an alternative to the surrogate's
    # switch action; the surrogate is a coarse heuristic and committing to it
    # blindly can fall below the single-layer result on fine cells
    strategy_stay_option: bool = True
    formula_has_next: bool = False


@dataclass
class SynthesisResult:
    policy: Policy
    values: ValueField
    rfield_db: Optional[np.ndarray]
    rfield_df: Optional[np.ndarray]
    r_initial: float
    layers: Optional[LayerSpec]
    grid: Optional[GridAbstraction]
    qeps: Optional[QepsTable]
    waypoints: Optional[WaypointModel]
    switch_sets: Optional[SwitchSets]
    strategy: Optional[np.ndarray]
    qbar0_db: Optional[np.ndarray]
    qbar0_df: Optional[np.ndarray]
    warnings: List[str] = field(default_factory=list)


def optimize_switch_strategy(
    model: LtiGmdp,
    layers: LayerSpec,
    dfa: Dfa,
    labels: LabelMap,
    surrogate_counts,
    fine_grid: GridAbstraction,
    tol: float = DEFAULT_TOL,
    max_iterations: int = DEFAULT_MAX_ITER,
    dense_fallback: bool = False,
) -> np.ndarray:
    """Layer-switch actions per fine cell from a coarse surrogate abstraction.

    The surrogate value-iterates with the full joint (input, switch) choice at
    the fine layering's deviations; each fine cell inherits the action of its
    nearest surrogate representative.
    """
    surrogate_counts = tuple(int(c) for c in surrogate_counts)
    if any(s > c for s, c in zip(surrogate_counts, fine_grid.counts)):
        raise ConfigurationError(
            f"surrogate counts {surrogate_counts} must be coarser than the fine "
            f"grid {fine_grid.counts}"
        )
    surrogate = build_grid(
        model,
        fine_grid.box,
        surrogate_counts,
        [len(v) for v in fine_grid.input_levels],
        beta_policy=fine_grid.beta_policy,
    )
    transition_factors(surrogate, model, dense_fallback=dense_fallback)
    qeps = QepsTable(surrogate, dfa, labels, model, layers.eps, layers.D)
    ctx = DbDpContext(surrogate, surrogate.kernel, qeps, layers, dfa, strategy=None)
    v = ctx.zero_values()
    for _ in range(max_iterations):
        v_new = ctx.sweep(v)
        resid = float(np.max(np.abs(v_new - v)))
        v = v_new
        if resid < tol:
            break
    m_out, _ = ctx.maximized_expectations(v)
    n_cells_s = surrogate.n_cells
    strat_s = np.zeros((n_cells_s, dfa.n_states, layers.n_layers), dtype=np.int8)
    delta = layers.delta
    for i in range(layers.n_layers):
        for q in range(dfa.n_states):
            best_val = np.full(n_cells_s, -np.inf)
            best_j = np.zeros(n_cells_s, dtype=np.int8)
            for j in range(layers.n_layers):
                cand = np.clip(m_out[q, j] - delta[i, j], 0.0, 1.0)
                better = cand > best_val + 1e-15
                best_j[better] = j
                best_val[better] = cand[better]
            strat_s[:, q, i] = best_j
    # nearest surrogate representative, independently per dimension
    maps = []
    for d in range(fine_grid.dim):
        fine = fine_grid.reps_per_dim[d][:, None]
        coarse = surrogate.reps_per_dim[d][None, :]
        maps.append(np.argmin(np.abs(fine - coarse), axis=1))
    mesh = np.meshgrid(*maps, indexing="ij")
    flat = np.ravel_multi_index(tuple(m.reshape(-1) for m in mesh), surrogate.counts)
    return strat_s[flat]


def _value_iterate(sweep_fn, v0: ValueField, tol: float, max_iterations: int) -> ValueField:
    v = v0
    mono = []
    resid = float("inf")
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        v_new = sweep_fn(v)
        diffs = []
        if v.db is not None:
            diffs.append((v_new.db - v.db).reshape(-1))
        if v.df is not None:
            diffs.append((v_new.df - v.df).reshape(-1))
        all_diffs = np.concatenate(diffs) if diffs else np.zeros(1)
        resid = float(np.max(np.abs(all_diffs)))
        mono.append(float(np.min(all_diffs)))
        v = v_new
        if resid < tol:
            break
    v.iteration = iteration
    v.converged = resid < tol
    v.residual = resid
    v.min_increments = mono
    return v


def _active_mask(grid: GridAbstraction, n_layers: int, partial_masks) -> Optional[np.ndarray]:
    if not partial_masks:
        return None
    active = np.ones((grid.n_cells, n_layers), dtype=bool)
    reps = grid.reps_array()
    for layer_idx, keep_box in partial_masks:
        if not 0 <= layer_idx < n_layers:
            raise ConfigurationError(f"partial mask layer {layer_idx} out of range")
        inside = keep_box.contains_points(reps)
        active[~inside, layer_idx] = False
    return active


def synthesize(
    model: LtiGmdp, dfa: Dfa, labels: LabelMap, settings: SynthesisSettings
) -> SynthesisResult:
    """Quantify, abstract, value-iterate, and extract the argmax policy.

    Returns converged lower-bound values, the policy, and the robust
    satisfaction probability fields over initial abstract states. Values stay
    valid lower bounds even when the iteration cap is hit (the run is then
    flagged unconverged).
    """
    if settings.mode not in MODES:
        raise ConfigurationError(f"unknown mode {settings.mode!r}; pick one of {MODES}")
    warnings: List[str] = []
    uses_waypoints = settings.mode in ("df-only", "heterogeneous")
    if uses_waypoints and settings.formula_has_next:
        raise ConfigurationError(
            "the next operator has no waypoint-layer semantics; "
            "discretization-free synthesis rejects formulas containing X"
        )
    if uses_waypoints and settings.waypoint is None:
        raise ConfigurationError(f"mode {settings.mode} needs a waypoint block")

    grid = None
    qeps = None
    layers = None
    db_ctx = None
    strategy = None
    if settings.mode in ("db-single", "db-multilayer", "heterogeneous"):
        if settings.counts is None or settings.input_counts is None:
            raise ConfigurationError(f"mode {settings.mode} needs a grid block")
        eps = np.asarray(settings.eps, dtype=float).reshape(-1)
        if eps.size == 0:
            raise ConfigurationError("layers block must list at least one precision")
        if settings.mode == "db-single" and eps.size != 1:
            raise ConfigurationError("db-single mode takes exactly one precision")
        box = settings.grid_box if settings.grid_box is not None else model.state_box
        grid = build_grid(
            model, box, settings.counts, settings.input_counts, settings.beta_policy
        )
        d_mat = weighting_matrix(model.C)
        if settings.delta_override is not None:
            delta = np.atleast_2d(np.asarray(settings.delta_override, dtype=float))
            layers = LayerSpec(eps=eps, delta=delta, D=d_mat, interface_gain=settings.gain)
        else:
            layers = layer_matrix(model, d_mat, eps, grid.beta_box, gain=settings.gain)
        transition_factors(grid, model, dense_fallback=settings.dense_fallback)
        qeps = QepsTable(grid, dfa, labels, model, layers.eps, layers.D)
        active = _active_mask(grid, layers.n_layers, settings.partial_masks)
        if settings.mode == "db-multilayer":
            if settings.surrogate_counts is None:
                raise ConfigurationError("db-multilayer mode needs surrogate counts")
            strategy = optimize_switch_strategy(
                model,
                layers,
                dfa,
                labels,
                settings.surrogate_counts,
                grid,
                tol=settings.tol,
                max_iterations=settings.max_iterations,
                dense_fallback=settings.dense_fallback,
            )
            db_ctx = DbDpContext(
                grid,
                grid.kernel,
                qeps,
                layers,
                dfa,
                strategy=strategy,
                stay_option=settings.strategy_stay_option,
                active=active,
            )
        elif settings.mode == "db-single":
            stay = np.zeros((grid.n_cells, dfa.n_states, 1), dtype=np.int8)
            db_ctx = DbDpContext(
                grid, grid.kernel, qeps, layers, dfa, strategy=stay, active=active
            )
        else:
            db_ctx = DbDpContext(
                grid, grid.kernel, qeps, layers, dfa, strategy=None, active=active
            )

    waypoints = None
    df_ctx = None
    if uses_waypoints:
        wp = settings.waypoint
        try:
            waypoints = build_waypoint_model(
                model,
                labels,
                wp.sample_count,
                wp.n_s,
                wp.delta_w,
                wp.K,
                wp.d_w,
                wp.seed,
                augment_rounds=wp.augment_rounds,
            )
        except PartialModelError as exc:
            if not wp.allow_partial or exc.partial_model is None:
                raise
            waypoints = exc.partial_model
            warnings.append(
                f"waypoint graph not strongly connected; continuing on the largest "
                f"strongly connected component with {waypoints.n_waypoints} waypoints "
                f"({exc})"
            )
        df_ctx = DfDpContext(waypoints, dfa)

    switch_sets = None
    if settings.mode == "heterogeneous":
        switch_sets = compute_switch_sets(
            grid, waypoints, layers, rep_letters=qeps.rep_letters
        )

    # value iteration per mode
    if settings.mode in ("db-single", "db-multilayer"):
        def sweep(v: ValueField) -> ValueField:
            return ValueField(db=db_ctx.sweep(v.db), iteration=v.iteration + 1)

        v0 = ValueField(db=db_ctx.zero_values())
    elif settings.mode == "df-only":
        def sweep(v: ValueField) -> ValueField:
            return ValueField(df=df_ctx.sweep(v.df), iteration=v.iteration + 1)

        v0 = ValueField(df=df_ctx.zero_values())
    else:
        def sweep(v: ValueField) -> ValueField:
            v_db_next = db_ctx.sweep(v.db)
            v_df_next = df_ctx.sweep(v.df)
            v_df_out, v_db_out = _combine_heterogeneous(
                v_db_next, v_df_next, switch_sets, dfa.n_states, layers.n_layers
            )
            return ValueField(db=v_db_out, df=v_df_out, iteration=v.iteration + 1)

        v0 = ValueField(db=db_ctx.zero_values(), df=df_ctx.zero_values())

    values = _value_iterate(sweep, v0, settings.tol, settings.max_iterations)
    if not values.converged:
        warnings.append(
            f"value iteration stopped at {values.iteration} sweeps with residual "
            f"{values.residual:.3g} above tolerance {settings.tol:.3g}; values remain "
            f"valid lower bounds"
        )

    # policy extraction at the fixed point
    policy = Policy()
    if db_ctx is not None:
        input_idx, switch_layer, m_out = db_ctx.extract_policy(values.db)
        policy.input_idx = input_idx
        policy.switch_layer = switch_layer
    if df_ctx is not None:
        policy.df_succ = df_ctx.extract_policy(values.df)
    if settings.mode == "heterogeneous":
        v_db_next = db_ctx.sweep(values.db)
        v_df_next = df_ctx.sweep(values.df)
        policy.bf_target = _bf_policy(
            v_db_next, v_df_next, switch_sets, dfa.n_states, layers.n_layers
        )
        policy.df_fb_layer = _fb_policy(
            v_db_next, v_df_next, policy.df_succ, switch_sets, dfa.n_states,
            layers.n_layers,
        )

    # robust satisfaction probability fields over initial abstract states
    acc = dfa.accepting_mask()
    rfield_db = None
    qbar0_db = None
    if grid is not None:
        qbar0_db = dfa.transitions[dfa.q0, qeps.rep_letters]
        best_layers = values.db[np.arange(grid.n_cells), qbar0_db, :].max(axis=1)
        rfield_db = np.maximum(acc[qbar0_db].astype(float), best_layers)
    rfield_df = None
    qbar0_df = None
    if waypoints is not None:
        qbar0_df = dfa.transitions[dfa.q0, waypoints.letters]
        own = values.df[np.arange(waypoints.n_waypoints), qbar0_df]
        rfield_df = np.maximum(acc[qbar0_df].astype(float), own)

    r_initial = 0.0
    x0 = model.x0
    if grid is not None:
        from .grid import project

        cell0 = project(grid, x0)
        if cell0 != grid.sink_index:
            r_initial = max(r_initial, float(rfield_db[cell0]))
    if waypoints is not None:
        for w in waypoints.containing(x0):
            r_initial = max(r_initial, float(rfield_df[w]))

    return SynthesisResult(
        policy=policy,
        values=values,
        rfield_db=rfield_db,
        rfield_df=rfield_df,
        r_initial=r_initial,
        layers=layers,
        grid=grid,
        qeps=qeps,
        waypoints=waypoints,
        switch_sets=switch_sets,
        strategy=strategy,
        qbar0_db=qbar0_db,
        qbar0_df=qbar0_df,
        warnings=warnings,
    )
