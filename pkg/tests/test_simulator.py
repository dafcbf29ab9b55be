import numpy as np
import pytest

from cmfsde.errors import InvalidInputError, NumericalBlowupError
from cmfsde.fixed_point import solve_coupled
from cmfsde.model import builtin_model, constant_model
from cmfsde.numerics import MarginalLawFlow, RngStream, TimeGrid
from cmfsde.oracles import kalman_bucy
from cmfsde.policy import LinearPolicy
from cmfsde.simulator import (conditional_moments, fkk_propagate, martingale_check,
                              particle_expectation, simulate, zakai_consistency)
from cmfsde.validation import kalman_error

U0 = LinearPolicy.constant(0.0)


@pytest.fixture(scope="module")
def sigmoid_ens():
    c = builtin_model("bounded_sigmoid")
    return c, solve_coupled(c, LinearPolicy((0.1, 0.3), ("const", "y")), TimeGrid(1.0, 40), 6, 500,
                            RngStream(2))


def test_structural_invariants(sigmoid_ens):
    _, ens = sigmoid_ens
    assert np.all(ens.logL[0] == 0.0)
    assert np.all(ens.S0 > 0)
    np.testing.assert_array_equal(ens.U, ens.S / ens.S0)
    np.testing.assert_allclose(ens.law_weights.sum(axis=1), 1.0)
    np.testing.assert_allclose(ens.law_weights, ens.S0 / ens.S0.sum(axis=1, keepdims=True))
    assert np.all((ens.ess >= 1 - 1e-9) & (ens.ess <= ens.N + 1e-9))
    assert ens.X.shape == (41, 6, 500)
    assert not ens.X.flags.writeable


def test_conditional_moments_of_constants(sigmoid_ens):
    _, ens = sigmoid_ens
    np.testing.assert_allclose(conditional_moments(ens, np.ones_like(ens.X)), 1.0)
    np.testing.assert_allclose(conditional_moments(ens, ens.X), ens.U, rtol=1e-12, atol=1e-12)


def test_zero_observation_is_unweighted():
    c = builtin_model("zero_observation")
    ens = solve_coupled(c, U0, TimeGrid(1.0, 20), 4, 300, RngStream(0))
    assert np.all(ens.logL == 0.0)
    np.testing.assert_allclose(ens.U, ens.X.mean(axis=2), rtol=0, atol=1e-14)
    np.testing.assert_allclose(ens.law_weights, 0.25)


def test_zero_diffusion_stays_put():
    c = builtin_model("bounded_sigmoid", sigma0=0.0)
    ens = solve_coupled(c, U0, TimeGrid(1.0, 20), 4, 100, RngStream(0))
    assert np.all(ens.X == c.x0)
    np.testing.assert_allclose(ens.U, c.x0)


def test_thread_count_does_not_change_results():
    c = builtin_model("bounded_sigmoid")
    g = TimeGrid(1.0, 10)
    # 3 scenarios x 3000 particles spans several work chunks
    a = solve_coupled(c, U0, g, 3, 3000, RngStream(8), threads=1)
    b = solve_coupled(c, U0, g, 3, 3000, RngStream(8), threads=3)
    for name in ("X", "logL", "U", "S", "S0", "ess"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes(), name


def test_scenario_results_do_not_depend_on_ensemble_size():
    # the likelihood and state of scenario 0 depend only on its own noise
    c = builtin_model("no_meanfield")
    g = TimeGrid(1.0, 10)
    small = solve_coupled(c, U0, g, 2, 50, RngStream(4))
    large = solve_coupled(c, U0, g, 5, 50, RngStream(4))
    np.testing.assert_allclose(small.X[:, 0], large.X[:, 0], rtol=1e-13, atol=1e-15)
    np.testing.assert_array_equal(small.Y[0], large.Y[0])


def test_kalman_oracle_moderate():
    c = builtin_model("linear_gaussian")
    ens = simulate(c, U0, MarginalLawFlow.dirac(TimeGrid(1.0, 100), 1.0), TimeGrid(1.0, 100), 8,
                   4000, RngStream(3))
    assert kalman_error(c, ens).max() <= 0.05


def test_kalman_riccati_steady_state():
    # with no observation signal P follows sigma^2 - c^2 P^2 toward sigma/c
    Y = np.zeros((1, 4001))
    _, P = kalman_bucy(Y, 0.005, 0.0, 2.0, 1.0)
    assert P[0, -1] == pytest.approx(2.0, rel=1e-6)
    assert P[0, 0] == 0.0


def test_fkk_matches_bayes_ratio(sigmoid_ens):
    c, ens = sigmoid_ens
    assert np.abs(fkk_propagate(ens, c) - ens.U).max() < 0.05


def test_zakai_defect_small(sigmoid_ens):
    c, ens = sigmoid_ens
    assert zakai_consistency(ens, c).max() < 0.05


def test_zakai_defect_zero_without_observation():
    c = builtin_model("zero_observation")
    ens = solve_coupled(c, U0, TimeGrid(1.0, 20), 3, 100, RngStream(0))
    assert zakai_consistency(ens, c).max() < 1e-13


def test_likelihood_martingale():
    c = builtin_model("bounded_sigmoid", h0=2.0)
    ens = solve_coupled(c, U0, TimeGrid(1.0, 40), 32, 400, RngStream(6), with_cost=False)
    dev, se = martingale_check(ens)
    assert dev <= 3 * se


def test_particle_expectation_constant(sigmoid_ens):
    _, ens = sigmoid_ens
    assert particle_expectation(ens, np.ones_like, 0) == 1.0


def test_simulate_needs_matching_flow():
    c = builtin_model("bounded_sigmoid")
    with pytest.raises(InvalidInputError):
        simulate(c, U0, None, TimeGrid(1.0, 10), 2, 10, RngStream(0))
    with pytest.raises(InvalidInputError):
        simulate(c, U0, MarginalLawFlow.dirac(TimeGrid(1.0, 11), 0.0), TimeGrid(1.0, 10), 2, 10,
                 RngStream(0))


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_blowup_reports_location():
    c = constant_model(sigma=1.0, h=1e200, x0=0.0)
    with pytest.raises(NumericalBlowupError) as info:
        solve_coupled(c, U0, TimeGrid(1.0, 10), 2, 4, RngStream(0), with_cost=False)
    m, i, k = info.value.location
    assert k >= 1 and 0 <= m < 2 and 0 <= i < 4
