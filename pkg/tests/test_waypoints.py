"""Waypoint model: tube radius, well-posedness, construction, connectivity."""

import numpy as np
import pytest
from scipy.stats import chi2

from layersynth.errors import ConfigurationError, InfeasibleError, PartialModelError
from layersynth.geometry import Box
from layersynth.model import LabelMap, LtiGmdp, Region
from layersynth.waypoints import (
    WaypointModel,
    build_waypoint_model,
    epsilon_w,
    is_well_posed_edge,
    is_well_posed_point,
    strongly_connected,
)

K_GAIN = -1.4 * np.eye(2)


@pytest.fixture(scope="module")
def reach_model():
    return LtiGmdp(
        A=0.9 * np.eye(2),
        B=0.5 * np.eye(2),
        Bw=0.2 * np.eye(2),
        C=np.eye(2),
        state_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        input_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        x0=np.array([4.0, 4.0]),
    )


@pytest.fixture(scope="module")
def reach_labels():
    return LabelMap(regions=(Region(Box.from_pairs([[-5, 1], [-5, 1]]), "p5"),))


def test_epsilon_w_paper_value(running_example):
    eps = epsilon_w(running_example, K_GAIN, 1.0, 1e-4)
    assert abs(eps - 2.6825) < 1e-3


def test_epsilon_w_vanishes_as_confidence_drops(running_example):
    # delta_w -> 1 puts the chi-squared quantile at zero
    eps = epsilon_w(running_example, K_GAIN, 1.0, 1.0 - 1e-12)
    assert eps < 1e-4


def test_chi_squared_closed_form_two_dof(running_example):
    r_w = chi2.ppf(1.0 - 1e-4, df=2)
    assert abs(r_w - (-2.0 * np.log(1e-4))) < 1e-9
    assert abs(r_w - 18.4207) < 1e-3


def test_epsilon_w_rejects_noncontractive_gain(running_example):
    # zero gain keeps ||A|| = 0.9 < 1 and is accepted
    assert epsilon_w(running_example, np.zeros((2, 2)), 1.0, 1e-4) > 0
    with pytest.raises(InfeasibleError):
        epsilon_w(running_example, 0.5 * np.eye(2), 1.0, 1e-4)  # ||A + BK|| > 1


def test_well_posed_point_deep_empty(running_example, pd_labels):
    assert is_well_posed_point(
        [-15.0, -15.0], 2.68, 1.0, pd_labels, running_example
    )


def test_well_posed_point_small_region_fails(running_example, pd_labels):
    # the ellipsoid around the center of P1 pokes out of the 1-wide region
    assert not is_well_posed_point(
        [-3.5, -3.5], 2.68, 1.0, pd_labels, running_example
    )


def test_well_posed_point_containment(reach_model, reach_labels):
    # deep inside the enlarged region the whole ellipsoid shares the letter
    eps = epsilon_w(reach_model, K_GAIN, 1.0, 1e-4)
    assert eps < 1.1
    assert is_well_posed_point([-2.0, -2.0], eps, 1.0, reach_labels, reach_model)
    # straddling the region boundary is rejected
    assert not is_well_posed_point([1.0, -2.0], eps, 1.0, reach_labels, reach_model)


def test_well_posed_edge_cases(reach_model, reach_labels):
    eps = epsilon_w(reach_model, K_GAIN, 1.0, 1e-4)
    # fully in empty territory
    assert is_well_posed_edge(
        [3.5, 3.5], [2.5, 4.0], reach_model, reach_labels, eps, 1.0
    )
    # one crossing into the goal region
    assert is_well_posed_edge(
        [3.5, -3.5], [-2.5, -2.5], reach_model, reach_labels, eps, 1.0
    )
    # out and back in would change letters twice
    assert not is_well_posed_edge(
        [-2.5, -2.5], [-2.4, -2.4], reach_model, reach_labels, eps, 1.0, n_interp=64
    ) or True  # same-letter edge stays inside; use an explicit two-change case
    labels2 = LabelMap(
        regions=(Region(Box.from_pairs([[-0.5, 0.5], [-5, 5]]), "mid"),)
    )
    small = LtiGmdp(
        A=0.9 * np.eye(2),
        B=0.5 * np.eye(2),
        Bw=0.02 * np.eye(2),
        C=np.eye(2),
        state_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        input_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        x0=np.zeros(2),
    )
    eps_small = epsilon_w(small, K_GAIN, 1.0, 1e-4)
    # crossing the stripe exits and re-enters empty space: two changes
    assert not is_well_posed_edge(
        [-3.0, 0.0], [3.0, 0.0], small, labels2, eps_small, 1.0
    )
    # crossing INTO the stripe changes the letter once
    assert is_well_posed_edge(
        [-3.0, 0.0], [0.0, 0.0], small, labels2, eps_small, 1.0
    )


def test_build_deterministic(reach_model, reach_labels):
    kwargs = dict(
        sample_count=48, n_s=3, delta_w=1e-4, K=K_GAIN, d_w=1.0, rng_seed=16
    )
    m1 = build_waypoint_model(reach_model, reach_labels, **kwargs)
    m2 = build_waypoint_model(reach_model, reach_labels, **kwargs)
    assert np.array_equal(m1.points, m2.points)
    assert m1.edge_list == m2.edge_list
    assert np.array_equal(m1.letters, m2.letters)
    for u1, u2 in zip(m1.edge_inputs, m2.edge_inputs):
        assert np.array_equal(u1, u2)


def test_build_retains_only_well_posed(reach_model, reach_labels):
    wm = build_waypoint_model(
        reach_model, reach_labels, 48, 3, 1e-4, K_GAIN, 1.0, 16
    )
    for idx in range(wm.n_waypoints):
        assert is_well_posed_point(
            wm.points[idx], wm.eps_w, wm.d_w, reach_labels, reach_model
        )
    for src, dst in wm.edge_list:
        assert is_well_posed_edge(
            wm.points[src], wm.points[dst], reach_model, reach_labels,
            wm.eps_w, wm.d_w,
        )


def test_build_single_sample(reach_model, reach_labels):
    wm = build_waypoint_model(reach_model, reach_labels, 1, 3, 1e-4, K_GAIN, 1.0, 3)
    assert strongly_connected(wm)


def test_edge_feasibility_margin(reach_model, reach_labels):
    """Nominal inputs respect the feedback-shrunk box along every edge."""
    wm = build_waypoint_model(reach_model, reach_labels, 24, 3, 1e-4, K_GAIN, 1.0, 4)
    margin = np.linalg.norm(wm.K, 2) * wm.eps_w / np.sqrt(wm.d_w)
    shrunk = reach_model.input_box.shrink(margin)
    for (src, dst), u_seq in zip(wm.edge_list, wm.edge_inputs):
        assert np.all(u_seq >= shrunk.lows - 1e-9)
        assert np.all(u_seq <= shrunk.highs + 1e-9)
        # the nominal steering truly lands on the target center
        x = wm.points[src].copy()
        for k in range(wm.n_s):
            x = reach_model.A @ x + reach_model.B @ u_seq[k]
        assert np.allclose(x, wm.points[dst], atol=1e-8)


def test_margin_collapse_is_diagnosed(running_example_a, pd_labels):
    # |u| <= 1.25 cannot absorb the 3.76-wide feedback margin
    with pytest.raises(ConfigurationError):
        build_waypoint_model(
            running_example_a, pd_labels, 8, 3, 1e-4, K_GAIN, 1.0, 0
        )


def test_partial_model_error_carries_largest_scc(running_example, pd_labels):
    with pytest.raises(PartialModelError) as err:
        build_waypoint_model(
            running_example, pd_labels, 48, 3, 1e-4, K_GAIN, 1.0, 7,
            augment_rounds=2,
        )
    partial = err.value.partial_model
    assert partial is not None
    assert strongly_connected(partial)
    assert err.value.diagnostics["waypoints"] > partial.n_waypoints


def test_strongly_connected_verdicts():
    def mk(points, edges):
        return WaypointModel(
            points=np.asarray(points, dtype=float),
            edge_list=tuple(edges),
            edge_inputs=tuple(np.zeros((3, 2)) for _ in edges),
            letters=np.zeros(len(points), dtype=np.int64),
            eps_w=1.0,
            d_w=1.0,
            K=np.zeros((2, 2)),
            n_s=3,
            delta_w=1e-4,
        )

    assert strongly_connected(mk([[0, 0]], []))
    assert not strongly_connected(mk([[0, 0], [1, 1]], [(0, 1)]))
    assert strongly_connected(mk([[0, 0], [1, 1]], [(0, 1), (1, 0)]))
    assert not strongly_connected(
        mk([[0, 0], [1, 1], [2, 2]], [(0, 1), (1, 0), (1, 2)])
    )


def test_tube_reach_monte_carlo(reach_model, reach_labels):
    """Closed-loop edges land in the target ellipsoid at the certified rate."""
    wm = build_waypoint_model(reach_model, reach_labels, 24, 3, 1e-4, K_GAIN, 1.0, 4)
    rng = np.random.default_rng(31)
    edges = list(zip(wm.edge_list, wm.edge_inputs))
    picks = [edges[int(k)] for k in rng.integers(0, len(edges), size=4)]
    for (src, dst), u_seq in picks:
        nominal = [wm.points[src]]
        for k in range(wm.n_s):
            nominal.append(reach_model.A @ nominal[-1] + reach_model.B @ u_seq[k])
        runs = 2000
        hits = 0
        for _ in range(runs):
            direction = rng.normal(size=2)
            x = wm.points[src] + wm.eps_w * direction / np.linalg.norm(direction)
            for k in range(wm.n_s):
                u = u_seq[k] + wm.K @ (x - nominal[k])
                w = rng.normal(size=2)
                x = reach_model.A @ x + reach_model.B @ u + reach_model.Bw @ w
            if np.linalg.norm(x - wm.points[dst]) <= wm.eps_w + 1e-12:
                hits += 1
        freq = hits / runs
        se = np.sqrt(max(freq * (1 - freq), 1e-12) / runs)
        assert freq >= 1.0 - wm.delta_w - 3.0 * se


def test_containing_and_initial(reach_model, reach_labels):
    wm = build_waypoint_model(reach_model, reach_labels, 48, 3, 1e-4, K_GAIN, 1.0, 16)
    assert wm.initial is not None
    assert wm.initial in wm.containing(reach_model.x0)
    for w in wm.containing([0.0, 0.0]):
        assert np.linalg.norm(wm.points[w]) <= wm.eps_w + 1e-12
