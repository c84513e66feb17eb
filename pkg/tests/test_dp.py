"""Robust DP: backups, oracle equivalence, switch sets, heterogeneous sweeps."""

import numpy as np
import pytest

from layersynth.dfa import Dfa, to_dfa
from layersynth.dp import (
    DbDpContext,
    DfDpContext,
    SwitchSets,
    SynthesisSettings,
    ValueField,
    WaypointSettings,
    _combine_heterogeneous,
    compute_switch_sets,
    heterogeneous_sweep,
    optimize_switch_strategy,
    robust_backup_db,
    robust_backup_df,
    synthesize,
)
from layersynth.errors import ConfigurationError
from layersynth.geometry import Box
from layersynth.grid import DenseKernel, build_grid, transition_factors
from layersynth.model import LabelMap, LtiGmdp, Region
from layersynth.qeps import QepsTable
from layersynth.scltl import parse_scltl
from layersynth.simrel import LayerSpec
from layersynth.waypoints import WaypointModel, build_waypoint_model


class _MiniGrid:
    def __init__(self, n_cells):
        self.n_cells = n_cells
        self.sink_index = n_cells


class _TableQeps:
    """Explicit letter sets per (cell, layer) for synthetic instances."""

    def __init__(self, dfa, lettersets):
        self.dfa = dfa
        self.lettersets = lettersets

    def successors(self, q, cell, j):
        return frozenset(
            int(self.dfa.transitions[q, lt]) for lt in self.lettersets[cell][j]
        )

    def w_min(self, q, j, values_j, acc):
        n = len(self.lettersets)
        out = np.empty(n)
        for c in range(n):
            succs = {int(self.dfa.transitions[q, lt]) for lt in self.lettersets[c][j]}
            out[c] = min(
                max(1.0 if acc[qp] else 0.0, values_j[c, qp]) for qp in succs
            )
        return out


def _random_instance(rng):
    n_cells = int(rng.integers(3, 21))
    n_inputs = int(rng.integers(1, 4))
    n_q = int(rng.integers(2, 5))
    n_layers = int(rng.integers(1, 3))
    probs = rng.uniform(0, 1, size=(n_cells, n_inputs, n_cells))
    probs /= probs.sum(axis=2, keepdims=True)
    probs *= 1.0 - rng.uniform(0, 0.3, size=(n_cells, n_inputs, 1))
    trans = rng.integers(0, n_q, size=(n_q, 2))
    acc = frozenset({int(rng.integers(0, n_q))})
    for q in acc:
        trans[q, :] = q
    dfa = Dfa(n_states=n_q, q0=0, accepting=acc, transitions=trans, props=("p1",))
    delta = rng.uniform(0, 0.3, size=(n_layers, n_layers))
    eps = sorted(rng.uniform(0.1, 1.0, size=n_layers), reverse=True)
    layers = LayerSpec(eps=np.array(eps), delta=delta, D=np.eye(1))
    lettersets = [
        [
            tuple(
                sorted(
                    rng.choice(2, size=int(rng.integers(1, 3)), replace=False).tolist()
                )
            )
            for _ in range(n_layers)
        ]
        for _ in range(n_cells)
    ]
    return n_cells, n_inputs, n_q, n_layers, probs, dfa, layers, lettersets


def _naive_fixed_point(probs, dfa, layers, lettersets, tol=1e-13, iters=5000):
    """Literal triple-loop iteration of the robust operator."""
    n_cells, n_inputs, _ = probs.shape
    n_q = dfa.n_states
    n_layers = layers.n_layers
    acc = dfa.accepting_mask()
    values = np.zeros((n_cells, n_q, n_layers))
    for _ in range(iters):
        nxt = np.zeros_like(values)
        for c in range(n_cells):
            for q in range(n_q):
                for i in range(n_layers):
                    best = 0.0
                    for u in range(n_inputs):
                        for j in range(n_layers):
                            expect = 0.0
                            for c2 in range(n_cells):
                                succs = {
                                    int(dfa.transitions[q, lt])
                                    for lt in lettersets[c2][j]
                                }
                                wmin = min(
                                    max(
                                        1.0 if acc[qp] else 0.0, values[c2, qp, j]
                                    )
                                    for qp in succs
                                )
                                expect += probs[c, u, c2] * wmin
                            best = max(
                                best,
                                min(1.0, max(0.0, expect - layers.delta[i, j])),
                            )
                    nxt[c, q, i] = best
        if np.max(np.abs(nxt - values)) < tol:
            return nxt
        values = nxt
    return values


def _engine_fixed_point(probs, dfa, layers, lettersets, tol=1e-13, iters=5000):
    grid = _MiniGrid(probs.shape[0])
    ctx = DbDpContext(grid, DenseKernel(probs), _TableQeps(dfa, lettersets), layers, dfa)
    values = ctx.zero_values()
    for _ in range(iters):
        nxt = ctx.sweep(values)
        if np.max(np.abs(nxt - values)) < tol:
            return nxt
        values = nxt
    return values


def test_engine_matches_naive_oracle():
    rng = np.random.default_rng(42)
    worst = 0.0
    for _ in range(25):
        _, _, _, _, probs, dfa, layers, lettersets = _random_instance(rng)
        engine = _engine_fixed_point(probs, dfa, layers, lettersets)
        naive = _naive_fixed_point(probs, dfa, layers, lettersets)
        worst = max(worst, float(np.max(np.abs(engine - naive))))
    assert worst <= 1e-9


def test_scalar_backup_against_hand_chain():
    """Two-cell toy chain with hand-set kernel and deviation."""
    trans = np.array([[0, 1], [1, 1]])
    dfa = Dfa(
        n_states=2, q0=0, accepting=frozenset({1}), transitions=trans, props=("g",)
    )
    # cell 1 carries the goal letter; cell 0 is empty
    probs = np.zeros((2, 1, 2))
    probs[0, 0] = [0.3, 0.6]  # 0.1 leaks to the sink
    probs[1, 0] = [0.0, 0.9]
    layers = LayerSpec(eps=[0.5], delta=[[0.1]], D=np.eye(1))
    lettersets = [[(0,)], [(1,)]]
    values = ValueField(db=np.zeros((2, 2, 1)))
    grid = _MiniGrid(2)
    grid.kernel = DenseKernel(probs)
    backup = robust_backup_db(
        values, grid, dfa, layers, _TableQeps(dfa, lettersets), 0, 0, 0, 0, 0
    )
    # successor cell 1 reads the goal letter: accepting with mass 0.6
    assert abs(backup - max(0.0, 0.6 - 0.1)) < 1e-12


def test_backup_accepting_everywhere():
    trans = np.array([[1, 1], [1, 1]])
    dfa = Dfa(
        n_states=2, q0=0, accepting=frozenset({1}), transitions=trans, props=("g",)
    )
    probs = np.zeros((2, 1, 2))
    probs[0, 0] = [0.5, 0.5]
    probs[1, 0] = [0.2, 0.8]
    layers = LayerSpec(eps=[0.5], delta=[[0.0]], D=np.eye(1))
    lettersets = [[(0,)], [(1,)]]
    grid = _MiniGrid(2)
    grid.kernel = DenseKernel(probs)
    values = ValueField(db=np.zeros((2, 2, 1)))
    backup = robust_backup_db(
        values, grid, dfa, layers, _TableQeps(dfa, lettersets), 0, 0, 0, 0, 0
    )
    assert backup == 1.0


def test_backup_zero_fixed_point_component():
    trans = np.array([[0, 0], [1, 1]])
    dfa = Dfa(
        n_states=2, q0=0, accepting=frozenset({1}), transitions=trans, props=("g",)
    )
    probs = np.zeros((2, 1, 2))
    probs[0, 0] = [1.0, 0.0]
    probs[1, 0] = [1.0, 0.0]
    layers = LayerSpec(eps=[0.5], delta=[[0.0]], D=np.eye(1))
    lettersets = [[(0,)], [(0,)]]
    grid = _MiniGrid(2)
    grid.kernel = DenseKernel(probs)
    values = ValueField(db=np.zeros((2, 2, 1)))
    backup = robust_backup_db(
        values, grid, dfa, layers, _TableQeps(dfa, lettersets), 0, 0, 0, 0, 0
    )
    assert backup == 0.0


def _chain_waypoints(letters, delta_w=1e-4):
    n = len(letters)
    pts = np.stack([np.arange(n, dtype=float), np.zeros(n)], axis=1)
    edges = tuple((k, k + 1) for k in range(n - 1))
    return WaypointModel(
        points=pts,
        edge_list=edges,
        edge_inputs=tuple(np.zeros((3, 2)) for _ in edges),
        letters=np.asarray(letters, dtype=np.int64),
        eps_w=0.4,
        d_w=1.0,
        K=np.zeros((2, 2)),
        n_s=3,
        delta_w=delta_w,
    )


def _reach_dfa():
    # one proposition: empty keeps waiting, goal letter accepts
    trans = np.array([[0, 1], [1, 1]])
    return Dfa(
        n_states=2, q0=0, accepting=frozenset({1}), transitions=trans, props=("g",)
    )


def test_df_backup_accepting_arrival():
    dfa = _reach_dfa()
    wps = _chain_waypoints([0, 1])
    values = ValueField(df=np.zeros((2, 2)))
    val = robust_backup_df(values, wps, dfa, 0, 0, 1)
    assert abs(val - (1.0 - 1e-4)) < 1e-12


def test_df_backup_zero_continuation():
    dfa = _reach_dfa()
    wps = _chain_waypoints([0, 0])
    values = ValueField(df=np.zeros((2, 2)))
    assert robust_backup_df(values, wps, dfa, 0, 0, 1) == 0.0


def test_df_backup_traversal_to_sink_is_zero():
    # three states: start, accept, sink; the traversed letter kills the run
    trans = np.array([[0, 1, 2, 2], [1, 1, 1, 1], [2, 2, 2, 2]])
    dfa = Dfa(
        n_states=3,
        q0=0,
        accepting=frozenset({1}),
        transitions=trans,
        props=("g", "bad"),
        sink=2,
    )
    wps = _chain_waypoints([2, 1])  # source sits in the bad region
    values = ValueField(df=np.full((2, 3), 0.7))
    assert robust_backup_df(values, wps, dfa, 0, 0, 1) == 0.0


def test_df_chain_three_sweeps():
    dfa = _reach_dfa()
    wps = _chain_waypoints([0, 0, 0, 1])
    ctx = DfDpContext(wps, dfa)
    values = ctx.zero_values()
    for _ in range(3):
        values = ctx.sweep(values)
    assert abs(values[0, 0] - (1.0 - 3.0e-4)) < 1e-12
    assert abs(values[1, 0] - (1.0 - 2.0e-4)) < 1e-12


def test_heterogeneous_hand_fixture():
    """Covering minimum and tube option enter exactly as the sweep defines."""
    v_db_next = np.zeros((4, 1, 1))
    v_db_next[:, 0, 0] = [0.9, 0.85, 0.95, 0.2]
    v_df_next = np.zeros((2, 1))
    v_df_next[:, 0] = [0.5, 0.3]
    switch = SwitchSets(
        bf_cells_per_wp=((np.array([3]), np.array([], dtype=int)),),
        fb_cells=((np.array([0, 1, 2]), np.array([], dtype=int)),),
    )
    v_df_out, v_db_out = _combine_heterogeneous(v_db_next, v_df_next, switch, 1, 1)
    # waypoint 0 takes the covering minimum 0.85 over its own 0.5
    assert v_df_out[0, 0] == 0.85
    # waypoint 1 has no covering and keeps its own value
    assert v_df_out[1, 0] == 0.3
    # cell 3 may enter waypoint 0's tube and lifts to max(0.2, 0.5)
    assert v_db_out[3, 0, 0] == 0.5
    assert v_db_out[0, 0, 0] == 0.9


def test_heterogeneous_decoupled_degenerates():
    v_db_next = np.random.default_rng(0).uniform(size=(5, 2, 1))
    v_df_next = np.random.default_rng(1).uniform(size=(3, 2))
    empty = np.array([], dtype=int)
    switch = SwitchSets(
        bf_cells_per_wp=((empty, empty, empty),),
        fb_cells=((empty, empty, empty),),
    )
    v_df_out, v_db_out = _combine_heterogeneous(v_db_next, v_df_next, switch, 2, 1)
    assert np.array_equal(v_df_out, v_df_next)
    assert np.array_equal(v_db_out, v_db_next)


@pytest.fixture(scope="module")
def het_setup():
    model = LtiGmdp(
        A=0.9 * np.eye(2),
        B=0.5 * np.eye(2),
        Bw=0.2 * np.eye(2),
        C=np.eye(2),
        state_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        input_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        x0=np.array([4.0, 4.0]),
    )
    labels = LabelMap(regions=(Region(Box.from_pairs([[-5, 1], [-5, 1]]), "p5"),))
    ap = labels.propositions
    dfa = to_dfa(parse_scltl("(p5 | !p5) U p5", ap), ap)
    waypoints = build_waypoint_model(
        model, labels, 24, 3, 1e-4, -1.4 * np.eye(2), 1.0, 4
    )
    grid = build_grid(model, Box.from_pairs([[-4, 4], [-4, 4]]), (40, 40), (5, 5))
    transition_factors(grid, model)
    layers = LayerSpec(eps=[0.3], delta=[[0.05]], D=np.eye(2))
    qeps = QepsTable(grid, dfa, labels, model, layers.eps, layers.D)
    return model, labels, dfa, waypoints, grid, layers, qeps


def test_compute_switch_sets_geometry(het_setup):
    model, labels, dfa, waypoints, grid, layers, qeps = het_setup
    sets = compute_switch_sets(grid, waypoints, layers, rep_letters=qeps.rep_letters)
    eps_i = float(layers.eps[0])
    semi = waypoints.eps_w
    reps = grid.reps_array()
    for w in range(waypoints.n_waypoints):
        center = waypoints.points[w]
        inside_box = bool(
            np.all(center - semi >= grid.box.lows)
            and np.all(center + semi <= grid.box.highs)
        )
        cells = sets.fb_cells[0][w]
        if not inside_box:
            assert cells.size == 0
        if cells.size:
            # every covering cell really intersects the ellipsoid and the
            # in-cell deviation stays within the relation precision
            assert grid.max_rep_distance(np.diag(layers.D)) <= eps_i
            gap = np.maximum(0.0, np.abs(reps[cells] - center) - 0.5 * grid.widths)
            assert np.all(np.sum((gap / semi) ** 2, axis=1) <= 1.0 + 1e-12)
        # tube-entry cells satisfy the ellipsoid-in-ellipsoid closed form
        bf = sets.bf_cells_per_wp[0][w]
        if bf.size:
            dist = np.linalg.norm(reps[bf] - center, axis=1)
            assert np.all(dist + eps_i <= waypoints.eps_w + 1e-9)


def test_switch_sets_respect_label_consistency(het_setup):
    model, labels, dfa, waypoints, grid, layers, qeps = het_setup
    sets = compute_switch_sets(grid, waypoints, layers, rep_letters=qeps.rep_letters)
    for w in range(waypoints.n_waypoints):
        cells = sets.fb_cells[0][w]
        if cells.size:
            assert np.all(qeps.rep_letters[cells] == waypoints.letters[w])


def test_heterogeneous_sweep_monotone(het_setup):
    model, labels, dfa, waypoints, grid, layers, qeps = het_setup
    sets = compute_switch_sets(grid, waypoints, layers, rep_letters=qeps.rep_letters)
    values = ValueField(
        db=np.zeros((grid.n_cells, dfa.n_states, 1)),
        df=np.zeros((waypoints.n_waypoints, dfa.n_states)),
    )
    prev = values
    for _ in range(6):
        nxt = heterogeneous_sweep(
            prev, grid, waypoints, dfa, layers, sets, model=model, labels=labels
        )
        assert np.all(nxt.db >= prev.db - 1e-15)
        assert np.all(nxt.df >= prev.df - 1e-15)
        assert nxt.db.max() <= 1.0 and nxt.df.max() <= 1.0
        prev = nxt


def test_single_layer_strategy_constant(carpark_model, carpark_labels):
    dfa = to_dfa(parse_scltl("!p2 U p1", ("p1", "p2")), ("p1", "p2"))
    grid = build_grid(carpark_model, carpark_model.state_box, (30, 30), (3, 3))
    layers = LayerSpec(eps=[0.3], delta=[[0.05]], D=np.eye(2))
    strategy = optimize_switch_strategy(
        carpark_model, layers, dfa, carpark_labels, (10, 10), grid
    )
    assert np.all(strategy == 0)


def test_dominated_layer_never_selected(carpark_model, carpark_labels):
    """A layer with larger eps and entrywise-larger deviation column loses."""
    dfa = to_dfa(parse_scltl("!p2 U p1", ("p1", "p2")), ("p1", "p2"))
    grid = build_grid(carpark_model, carpark_model.state_box, (30, 30), (3, 3))
    # layer 2 has coarser output precision and a dominated deviation column
    layers = LayerSpec(
        eps=[0.2, 0.5], delta=[[0.01, 0.05], [0.01, 0.05]], D=np.eye(2)
    )
    strategy = optimize_switch_strategy(
        carpark_model, layers, dfa, carpark_labels, (10, 10), grid
    )
    assert np.all(strategy == 0)


def test_surrogate_must_be_coarser(carpark_model, carpark_labels):
    dfa = to_dfa(parse_scltl("!p2 U p1", ("p1", "p2")), ("p1", "p2"))
    grid = build_grid(carpark_model, carpark_model.state_box, (20, 20), (3, 3))
    layers = LayerSpec(eps=[0.3], delta=[[0.05]], D=np.eye(2))
    with pytest.raises(ConfigurationError):
        optimize_switch_strategy(
            carpark_model, layers, dfa, carpark_labels, (40, 40), grid
        )


def test_partial_mask_soundness(carpark_model, carpark_labels):
    dfa = to_dfa(parse_scltl("!p2 U p1", ("p1", "p2")), ("p1", "p2"))
    base = SynthesisSettings(
        mode="db-single",
        eps=[0.2],
        counts=[40, 40],
        input_counts=[3, 3],
        delta_override=[[0.02]],
    )
    full = synthesize(carpark_model, dfa, carpark_labels, base)
    masked_settings = SynthesisSettings(
        mode="db-single",
        eps=[0.2],
        counts=[40, 40],
        input_counts=[3, 3],
        delta_override=[[0.02]],
        partial_masks=((0, Box.from_pairs([[0, 5], [-5, 5]])),),
    )
    masked = synthesize(carpark_model, dfa, carpark_labels, masked_settings)
    assert np.all(masked.values.db <= full.values.db + 1e-12)
    reps = full.grid.reps_array()
    outside = ~Box.from_pairs([[0, 5], [-5, 5]]).contains_points(reps)
    assert np.all(masked.values.db[outside] == 0.0)


def test_layer_collapse_equivalence(carpark_model, carpark_labels):
    """Two identical layers reproduce the single-layer fixed point."""
    dfa = to_dfa(parse_scltl("!p2 U p1", ("p1", "p2")), ("p1", "p2"))
    single = synthesize(
        carpark_model,
        dfa,
        carpark_labels,
        SynthesisSettings(
            mode="db-single",
            eps=[0.2],
            counts=[30, 30],
            input_counts=[3, 3],
            delta_override=[[0.03]],
        ),
    )
    double = synthesize(
        carpark_model,
        dfa,
        carpark_labels,
        SynthesisSettings(
            mode="db-multilayer",
            eps=[0.2, 0.2],
            counts=[30, 30],
            input_counts=[3, 3],
            surrogate_counts=[10, 10],
            delta_override=[[0.03, 0.03], [0.03, 0.03]],
        ),
    )
    for layer in range(2):
        assert np.allclose(
            double.values.db[:, :, layer], single.values.db[:, :, 0], atol=1e-9
        )


def test_synthesize_rejects_next_with_waypoints(het_setup):
    model, labels, dfa, waypoints, grid, layers, qeps = het_setup
    settings = SynthesisSettings(
        mode="df-only",
        waypoint=WaypointSettings(
            sample_count=4, n_s=3, delta_w=1e-4, K=-1.4 * np.eye(2)
        ),
        formula_has_next=True,
    )
    with pytest.raises(ConfigurationError):
        synthesize(model, dfa, labels, settings)


def test_policy_tie_breaking_deterministic():
    rng = np.random.default_rng(8)
    _, _, _, _, probs, dfa, layers, lettersets = _random_instance(rng)
    grid = _MiniGrid(probs.shape[0])
    ctx = DbDpContext(
        grid, DenseKernel(probs), _TableQeps(dfa, lettersets), layers, dfa
    )
    values = ctx.zero_values()
    for _ in range(200):
        values = ctx.sweep(values)
    a1 = ctx.extract_policy(values)
    a2 = ctx.extract_policy(values)
    assert np.array_equal(a1[0], a2[0])
    assert np.array_equal(a1[1], a2[1])
