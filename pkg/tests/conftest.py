"""Shared fixtures: the 1D/2D parking studies and boundary-point sampling."""

import numpy as np
import pytest

from simquant.models import Box, GridSpec, LtiModel, build_grid
from simquant.simrel import optimize_epsilon


def make_parking_1d() -> LtiModel:
    return LtiModel(
        A=[[0.9]], B=[[0.5]], B_w=[[1.0]], C=[[1.0]],
        state_box=Box([-10.0], [10.0]), input_box=Box([-1.0], [1.0]),
    )


def make_parking_2d() -> LtiModel:
    return LtiModel(
        A=0.9 * np.eye(2), B=0.7 * np.eye(2), B_w=np.eye(2), C=np.eye(2),
        state_box=Box([-2.0, -8.0], [10.0, 5.0]), input_box=Box([-1.0, -1.0], [1.0, 1.0]),
    )


PARKING_1D_INPUTS = [[-1.0], [-0.5], [0.0], [0.5], [1.0]]


def sample_ellipsoid_boundary(rng, D, epsilon, n):
    """n points uniformly on the boundary x^T D x = epsilon^2."""
    dim = D.shape[0]
    vals, vecs = np.linalg.eigh(D)
    d_inv_half = vecs @ np.diag(vals**-0.5) @ vecs.T
    z = rng.standard_normal((n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    return epsilon * z @ d_inv_half


@pytest.fixture(scope="session")
def parking_1d():
    return make_parking_1d()


@pytest.fixture(scope="session")
def parking_2d():
    return make_parking_2d()


@pytest.fixture(scope="session")
def abstraction_1d(parking_1d):
    return build_grid(parking_1d, GridSpec((200,), PARKING_1D_INPUTS), build_kernel=True)


@pytest.fixture(scope="session")
def rel_1d_delta0(parking_1d, abstraction_1d):
    return optimize_epsilon(parking_1d, abstraction_1d, 0.0)


@pytest.fixture(scope="session")
def rel_1d_delta012(parking_1d, abstraction_1d):
    return optimize_epsilon(parking_1d, abstraction_1d, 0.012)


@pytest.fixture(scope="session")
def rel_1d_delta018(parking_1d, abstraction_1d):
    return optimize_epsilon(parking_1d, abstraction_1d, 0.018)


@pytest.fixture(scope="session")
def synthesis_1d(parking_1d, abstraction_1d, rel_1d_delta012):
    """Full 1D parking synthesis bundle at (epsilon, delta) ~ (0.2, 0.012)."""
    from simquant.models import Box
    from simquant.specs import Proposition, robust_labels, template_reach_avoid
    from simquant.synthesis import (
        AbstractPolicy,
        robust_value_iteration,
        satisfaction_bounds,
    )

    p1 = Proposition("P1", Box([4.75], [6.25]))
    p2 = Proposition("P2", Box([6.25], [10.0]))
    dfa = template_reach_avoid(p1, p2)
    labeling = robust_labels(abstraction_1d, [p1, p2], rel_1d_delta012.epsilon)
    table, policy = robust_value_iteration(
        abstraction_1d.kernel, dfa, labeling, rel_1d_delta012.delta
    )
    policy = AbstractPolicy(policy.choice, policy.q_states, abstraction_1d.input_samples)
    return {
        "model": parking_1d,
        "abstraction": abstraction_1d,
        "rel": rel_1d_delta012,
        "propositions": [p1, p2],
        "dfa": dfa,
        "labeling": labeling,
        "table": table,
        "policy": policy,
        "bounds": satisfaction_bounds(table, labeling, dfa),
    }
