import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cmfsde.errors import DerivativeMismatchError, InvalidInputError
from cmfsde.model import (BUILTIN_NAMES, PathFeatureKernel, builtin_model, check_derivatives,
                          constant_model, validate_assumptions)
from cmfsde.numerics import TimeGrid

real = st.floats(-20, 20, allow_nan=False)


@pytest.mark.parametrize("name", BUILTIN_NAMES)
def test_builtin_derivatives_consistent(name):
    report = check_derivatives(builtin_model(name), probes=500)
    assert max(report.values()) < 1e-5


def test_linear_gaussian_derivatives_with_control_and_cost():
    c = builtin_model("linear_gaussian", sigma_z=0.4, rho=0.7, z_target=0.2)
    assert max(check_derivatives(c, probes=200).values()) < 1e-5


def test_exact_derivative_passes():
    c = dataclasses.replace(constant_model(), sigma=lambda t, a, y, z: np.sin(y),
                            dsigma_dy=lambda t, a, y, z: np.cos(y))
    assert check_derivatives(c, probes=100)["dsigma_dy"] < 1e-6


def test_wrong_derivative_named():
    c = dataclasses.replace(constant_model(), sigma=lambda t, a, y, z: np.sin(y),
                            dsigma_dy=lambda t, a, y, z: -np.cos(y))
    with pytest.raises(DerivativeMismatchError) as info:
        check_derivatives(c, probes=100)
    assert info.value.field == "dsigma_dy"


def test_probe_minimum():
    with pytest.raises(InvalidInputError):
        check_derivatives(builtin_model("bounded_sigmoid"), probes=99)
    with pytest.raises(InvalidInputError):
        validate_assumptions(builtin_model("bounded_sigmoid"), probes=10)


def test_builtin_examples():
    assert builtin_model("zero_observation").h(0.0, 5.0) == 0.0
    assert builtin_model("linear_gaussian", c=1.0).h(0.0, 2.0) == 2.0
    with pytest.raises(InvalidInputError):
        builtin_model("no_such_model")
    with pytest.raises(InvalidInputError):
        builtin_model("bounded_sigmoid", not_a_parameter=1.0)


def test_sigmoid_sigma_bounded():
    c = builtin_model("bounded_sigmoid", sigma0=0.7)
    rng = np.random.default_rng(0)
    a, y = rng.normal(0, 50, (2, 100_000))
    z = rng.uniform(-1, 1, 100_000)
    assert np.max(np.abs(c.sigma(0.0, a, y, z))) <= 0.7


@settings(max_examples=100, deadline=None)
@given(real, real, real, st.floats(-1, 1))
def test_no_meanfield_ignores_y(a, y1, y2, z):
    c = builtin_model("no_meanfield")
    assert c.sigma(0.3, a, y1, z) == c.sigma(0.3, a, y2, z)


def test_sigmoid_report():
    rep = validate_assumptions(builtin_model("bounded_sigmoid"), probes=2000)
    for key in ("sigma", "h", "f", "Phi", "x*dh_dx", "x^2*dh_dx", "dsigma_dy", "dPhi_dx"):
        assert rep.bounded(key), key
    # x*h0*tanh(x) grows linearly in x; y*dsigma_dy grows along a = -y
    assert set(rep.flagged) == {"x*h", "y*dsigma_dy"}
    assert np.isfinite(list(rep.sup_large.values())).all()


def test_sigmoid_y_derivative_unbounded_along_cancelling_feature():
    c = builtin_model("bounded_sigmoid")
    y = np.array([10.0, 100.0, 1000.0])
    vals = np.abs(y * c.dsigma_dy(0.0, -y - 1 / 0.3, y, 0.0))
    assert np.all(np.diff(vals) > 0) and vals[-1] > 10


def test_linear_gaussian_flags_xh():
    rep = validate_assumptions(builtin_model("linear_gaussian"), probes=500)
    assert not rep.bounded("x*h")
    assert not rep.bounded("h")


def test_constant_model_bounds():
    rep = validate_assumptions(constant_model(sigma=1.0), probes=200)
    assert rep.flagged == ()
    assert rep.sup_small["sigma"] == 1.0
    assert rep.sup_small["h"] == 0.0
    assert rep.sup_small["f"] == 0.0


@pytest.mark.parametrize("n", [10, 100, 1000])
def test_kernel_mass_bound(n):
    k = PathFeatureKernel.exponential(c_kappa=1.3, rate=2.0)
    g = TimeGrid(2.0, n)
    W = k.weights(g)
    assert np.all(np.abs(W).sum(axis=1) <= 1.3 + 1e-12)
    assert np.allclose(np.triu(W, 1), 0.0)
    assert np.allclose(np.diag(W), 0.65)


def test_kernel_mass_violation_raises():
    k = PathFeatureKernel(alpha0=lambda t: np.full_like(t, 2.0), mass_bound=1.0)
    with pytest.raises(InvalidInputError):
        k.weights(TimeGrid(1.0, 4))


def test_identity_kernel_has_no_memory():
    W = PathFeatureKernel.identity().weights(TimeGrid(1.0, 5))
    np.testing.assert_array_equal(W, np.eye(6))


def test_empty_control_set():
    with pytest.raises(InvalidInputError):
        constant_model(control_set=(1.0, 0.0))
