"""Controller refinement and closed-loop Monte-Carlo validation."""

import numpy as np
import pytest

from layersynth.dfa import to_dfa
from layersynth.dp import SynthesisSettings, WaypointSettings, synthesize
from layersynth.errors import ContractError
from layersynth.geometry import Box
from layersynth.grid import project
from layersynth.model import LabelMap, LtiGmdp, Region
from layersynth.refine import (
    RefinedController,
    control_step,
    monte_carlo,
    simulate_trace,
)
from layersynth.scltl import parse_scltl


@pytest.fixture(scope="module")
def carpark_synthesis(carpark_model, carpark_labels):
    dfa = to_dfa(parse_scltl("!p2 U p1", ("p1", "p2")), ("p1", "p2"))
    result = synthesize(
        carpark_model,
        dfa,
        carpark_labels,
        SynthesisSettings(
            mode="db-multilayer",
            eps=[0.5, 0.2],
            counts=[60, 60],
            input_counts=[5, 5],
            surrogate_counts=[20, 20],
        ),
    )
    return carpark_model, carpark_labels, dfa, result


@pytest.fixture(scope="module")
def df_synthesis():
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
    dfa = to_dfa(parse_scltl("(p5 | !p5) U p5", ("p5",)), ("p5",))
    result = synthesize(
        model,
        dfa,
        labels,
        SynthesisSettings(
            mode="df-only",
            waypoint=WaypointSettings(
                sample_count=48, n_s=3, delta_w=1e-4, K=-1.4 * np.eye(2), seed=4
            ),
        ),
    )
    return model, labels, dfa, result


def test_db_identity_interface(carpark_synthesis):
    model, labels, dfa, result = carpark_synthesis
    controller = RefinedController(model, dfa, labels, result)
    x0 = np.array([2.0, -0.5])
    controller.reset(x0)
    u = control_step(controller, x0)
    mem = controller.memory
    cell = project(result.grid, x0)
    # the controller reports exactly the abstract input of its policy entry
    q0 = int(dfa.transitions[dfa.q0, labels.letter(x0)])
    layer = int(np.argmax(result.values.db[cell, q0, :]))
    u_idx = int(result.policy.input_idx[cell, q0, layer])
    assert np.allclose(u, result.grid.input_vector(u_idx))


def test_df_feedback_interface(df_synthesis):
    model, labels, dfa, result = df_synthesis
    controller = RefinedController(model, dfa, labels, result)
    wps = result.waypoints
    w = int(np.argmax(result.rfield_df))
    x_w = wps.points[w]
    controller.reset(x_w)
    assert controller.memory.branch == "df"
    u_at_center = control_step(controller, x_w)
    succ = int(result.policy.df_succ[w, controller.memory.q])
    if succ != NO_TARGET_SENTINEL:
        edge_pos = wps.edge_index()[(w, succ)]
        assert np.allclose(u_at_center, wps.edge_inputs[edge_pos][0])
    # offset from the waypoint adds exactly K (x - x_w)
    controller.reset(x_w)
    offset = np.array([0.1, 0.0])
    u_off = control_step(controller, x_w + offset)
    assert np.allclose(u_off - u_at_center, wps.K @ offset)


NO_TARGET_SENTINEL = -1


def test_controller_requires_reset(carpark_synthesis):
    model, labels, dfa, result = carpark_synthesis
    controller = RefinedController(model, dfa, labels, result)
    with pytest.raises(ContractError):
        controller.step(np.zeros(2))


def test_accepting_at_start(carpark_synthesis):
    model, labels, dfa, result = carpark_synthesis
    controller = RefinedController(model, dfa, labels, result)
    controller.reset(np.array([4.0, -0.5]))  # inside the goal region
    assert controller.accepted
    p_hat, half = monte_carlo(
        model, controller, dfa, labels, [4.0, -0.5], 50, 10, 1
    )
    assert p_hat == 1.0


def test_null_task_probability_zero():
    model = LtiGmdp(
        A=0.5 * np.eye(2),
        B=np.zeros((2, 2)),
        Bw=0.01 * np.eye(2),
        C=np.eye(2),
        state_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        input_box=Box.from_pairs([[-1, 1], [-1, 1]]),
        x0=np.array([-4.0, -4.0]),
    )
    labels = LabelMap(regions=(Region(Box.from_pairs([[4, 5], [4, 5]]), "goal"),))
    dfa = to_dfa(parse_scltl("(goal | !goal) U goal", ("goal",)), ("goal",))
    result = synthesize(
        model,
        dfa,
        labels,
        SynthesisSettings(
            mode="db-single",
            eps=[0.2],
            counts=[20, 20],
            input_counts=[1, 1],
            delta_override=[[0.0]],
        ),
    )
    controller = RefinedController(model, dfa, labels, result)
    # the uncontrollable contraction pulls to the origin, never the corner
    p_hat, _ = monte_carlo(model, controller, dfa, labels, [-4.0, -4.0], 200, 40, 3)
    assert p_hat == 0.0


def test_monte_carlo_seed_determinism(carpark_synthesis):
    model, labels, dfa, result = carpark_synthesis
    controller = RefinedController(model, dfa, labels, result)
    a = monte_carlo(model, controller, dfa, labels, [2.0, -0.5], 300, 80, 11)
    b = monte_carlo(model, controller, dfa, labels, [2.0, -0.5], 300, 80, 11)
    c = monte_carlo(model, controller, dfa, labels, [2.0, -0.5], 300, 80, 12)
    assert a == b
    assert a != c


def test_trace_shape_and_determinism(carpark_synthesis):
    model, labels, dfa, result = carpark_synthesis
    controller = RefinedController(model, dfa, labels, result)
    tr1 = simulate_trace(
        model, controller, dfa, labels, [2.0, -0.5], 60, np.random.default_rng(5)
    )
    tr2 = simulate_trace(
        model, controller, dfa, labels, [2.0, -0.5], 60, np.random.default_rng(5)
    )
    assert np.array_equal(tr1.states, tr2.states)
    assert tr1.satisfied == tr2.satisfied
    assert len(tr1.states) == len(tr1.inputs) + 1
    assert len(tr1.letters) == len(tr1.states)


def test_one_sided_validation_db(carpark_synthesis):
    model, labels, dfa, result = carpark_synthesis
    controller = RefinedController(model, dfa, labels, result)
    for x0 in [[2.0, -0.5], [3.2, -1.5], [0.0, 0.0]]:
        cell = project(result.grid, np.asarray(x0))
        certified = float(result.rfield_db[cell])
        p_hat, half = monte_carlo(model, controller, dfa, labels, x0, 800, 120, 21)
        se = half / 1.96
        assert p_hat + 3 * se >= certified - 1e-12, (x0, certified, p_hat)


def test_one_sided_validation_df(df_synthesis):
    model, labels, dfa, result = df_synthesis
    controller = RefinedController(model, dfa, labels, result)
    x0 = model.x0
    certified = max(
        (float(result.rfield_df[w]) for w in result.waypoints.containing(x0)),
        default=0.0,
    )
    p_hat, half = monte_carlo(model, controller, dfa, labels, x0, 800, 80, 31)
    se = half / 1.96
    assert certified > 0.99
    assert p_hat + 3 * se >= certified - 1e-12


def test_inputs_always_admissible(carpark_synthesis):
    model, labels, dfa, result = carpark_synthesis
    controller = RefinedController(model, dfa, labels, result)
    rng = np.random.default_rng(41)
    controller.reset(np.array([-2.0, -2.0]))
    x = np.array([-2.0, -2.0])
    for _ in range(100):
        u = controller.step(x)
        assert np.all(u >= model.input_box.lows - 1e-12)
        assert np.all(u <= model.input_box.highs + 1e-12)
        w = model.sample_noise(rng, 1)[0]
        x = model.A @ x + model.B @ u + model.Bw @ w
