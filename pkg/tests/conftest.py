"""Shared model and label fixtures for the test suite."""

import numpy as np
import pytest

from layersynth.geometry import Box
from layersynth.model import LabelMap, LtiGmdp, Region


@pytest.fixture(scope="session")
def running_example():
    """Enlarged package-delivery dynamics: X = [-20, 5]^2, U = [-5, 5]^2."""
    return LtiGmdp(
        A=0.9 * np.eye(2),
        B=0.5 * np.eye(2),
        Bw=0.5 * np.eye(2),
        C=np.eye(2),
        state_box=Box.from_pairs([[-20, 5], [-20, 5]]),
        input_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        x0=np.array([-3.5, -3.5]),
    )


@pytest.fixture(scope="session")
def running_example_a():
    """Homogeneous-layer variant: X = [-5, 5]^2, U = [-1.25, 1.25]^2."""
    return LtiGmdp(
        A=0.9 * np.eye(2),
        B=0.5 * np.eye(2),
        Bw=0.5 * np.eye(2),
        C=np.eye(2),
        state_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        input_box=Box.from_pairs([[-1.25, 1.25], [-1.25, 1.25]]),
        x0=np.array([-3.5, -3.5]),
    )


@pytest.fixture(scope="session")
def carpark_model():
    """2D car park: unit disturbance matrix with covariance 0.5 I."""
    return LtiGmdp(
        A=0.9 * np.eye(2),
        B=0.5 * np.eye(2),
        Bw=np.eye(2),
        C=np.eye(2),
        state_box=Box.from_pairs([[-5, 5], [-5, 5]]),
        input_box=Box.from_pairs([[-1, 1], [-1, 1]]),
        x0=np.array([-3.0, -3.0]),
        noise_cov=0.5 * np.eye(2),
    )


@pytest.fixture(scope="session")
def pd_labels():
    return LabelMap(
        regions=(
            Region(Box.from_pairs([[-4, -3], [-4, -3]]), "p1"),
            Region(Box.from_pairs([[0, 1], [0, 2.5]]), "p2"),
            Region(Box.from_pairs([[3, 5], [-2, -0.5]]), "p3"),
            Region(Box.from_pairs([[0, 1], [-4, 0]]), "p4"),
        )
    )


@pytest.fixture(scope="session")
def carpark_labels():
    return LabelMap(
        regions=(
            Region(Box.from_pairs([[3, 5], [-1, 0]]), "p1"),
            Region(Box.from_pairs([[3, 5], [0, 1]]), "p2"),
        )
    )
