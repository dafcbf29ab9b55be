import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmfsde.errors import InvalidInputError
from cmfsde.numerics import TimeGrid
from cmfsde.policy import (FEATURES, LinearPolicy, MixedPolicy, TablePolicy, observation_features,
                           perturb)

GRID = TimeGrid(1.0, 20)
coef = st.floats(-3, 3, allow_nan=False)


def paths(seed, M=3):
    rng = np.random.default_rng(seed)
    Y = np.zeros((M, GRID.n + 1))
    Y[:, 1:] = np.cumsum(rng.normal(0, np.sqrt(GRID.dt), (M, GRID.n)), axis=1)
    return Y


def test_feature_values_by_hand():
    g = TimeGrid(1.0, 4)
    Y = np.array([[0.0, 1.0, 2.0, 3.0, 4.0]])
    F = observation_features(g, Y, FEATURES, ewma_rate=1.0)
    np.testing.assert_array_equal(F[0, :, 0], 1.0)
    np.testing.assert_array_equal(F[0, :, 1], [0.0, 1.0, 2.0, 3.0])
    np.testing.assert_allclose(F[0, :, 2], [0.0, 0.0, 0.25, 0.75])
    gam = np.exp(-0.25)
    e1 = (1 - gam) * 1.0
    e2 = gam * e1 + (1 - gam) * 2.0
    np.testing.assert_allclose(F[0, :3, 3], [0.0, e1, e2])


def test_unknown_feature():
    with pytest.raises(InvalidInputError):
        observation_features(GRID, paths(0), ("const", "future_y"))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(0, GRID.n - 1), st.tuples(coef, coef, coef, coef))
def test_policy_adapted(seed, k, theta):
    u = LinearPolicy(theta, FEATURES)
    Y = paths(seed)
    Y2 = Y.copy()
    Y2[:, k + 1:] += 5.0
    np.testing.assert_array_equal(u.values(GRID, Y)[:, :k + 1], u.values(GRID, Y2)[:, :k + 1])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.tuples(coef, coef, coef, coef))
def test_policy_in_control_set(seed, theta):
    u = LinearPolicy(theta, FEATURES, -0.5, 0.25)
    z = u.values(GRID, paths(seed))
    assert z.min() >= -0.5 and z.max() <= 0.25
    assert u.in_set(GRID, paths(seed))
    act = u.active(GRID, paths(seed))
    raw = u.raw_values(GRID, paths(seed))
    np.testing.assert_array_equal(z[act], raw[act])


def test_theta_length_checked():
    with pytest.raises(InvalidInputError):
        LinearPolicy((1.0, 2.0), ("const",))


def test_perturb_examples():
    Y = paths(1)
    u0, u2 = LinearPolicy.constant(0.0, -5, 5), LinearPolicy.constant(2.0, -5, 5)
    np.testing.assert_allclose(perturb(u0, u2, 0.5).values(GRID, Y), 1.0)
    np.testing.assert_allclose(perturb(u0, u2, 0.5, mode="parameter").values(GRID, Y), 1.0)
    assert perturb(u0, u2, 1.0) is u2
    np.testing.assert_array_equal(perturb(u2, u2, 0.3).values(GRID, Y), u2.values(GRID, Y))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 1000), st.floats(0, 1), st.tuples(coef, coef), st.tuples(coef, coef))
def test_value_mixing_stays_in_set(seed, th, a, b):
    u = LinearPolicy(a, ("const", "y"))
    v = LinearPolicy(b, ("const", "y"))
    z = perturb(u, v, th).values(GRID, paths(seed))
    assert z.min() >= -1.0 - 1e-12 and z.max() <= 1.0 + 1e-12


def test_parameter_mode_needs_shared_features():
    u = LinearPolicy((0.0,), ("const",))
    v = LinearPolicy((0.0, 1.0), ("const", "y"))
    with pytest.raises(InvalidInputError):
        perturb(u, v, 0.5, mode="parameter")
    assert isinstance(perturb(u, v, 0.5), MixedPolicy)
    with pytest.raises(InvalidInputError):
        perturb(u, v, 1.5)


def test_table_policy_shape():
    Y = paths(0, M=2)
    t = TablePolicy(np.zeros((2, GRID.n)))
    assert t.values(GRID, Y).shape == (2, GRID.n)
    with pytest.raises(InvalidInputError):
        TablePolicy(np.zeros((3, GRID.n))).values(GRID, Y)
