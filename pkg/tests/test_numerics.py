import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import wasserstein_distance

from cmfsde.errors import CapacityError, InvalidInputError
from cmfsde.numerics import (EmpiricalLaw, MarginalLawFlow, RngStream, TimeGrid, quantile_mix,
                             wasserstein_1d, wasserstein_flow, wasserstein_pathspace)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)
samples = st.lists(finite, min_size=1, max_size=30)
weights_for = lambda n: st.lists(st.floats(0.01, 10.0), min_size=n, max_size=n)


def w2_oracle(a, b, grid=200_001):
    """Quantile-function integral on a fine midpoint grid."""
    q = (np.arange(grid) + 0.5) / grid
    return np.sqrt(np.mean((a.quantile(q) - b.quantile(q)) ** 2))


# ---------------------------------------------------------------- TimeGrid

def test_grid_endpoint_exact():
    g = TimeGrid(0.7, 3)
    assert g.times[-1] == 0.7
    assert g.times[0] == 0.0
    assert g.dt == pytest.approx(0.7 / 3)


@pytest.mark.parametrize("T,n", [(0.0, 10), (-1.0, 10), (1.0, 1), (float("inf"), 10)])
def test_grid_rejects(T, n):
    with pytest.raises(InvalidInputError):
        TimeGrid(T, n)


# --------------------------------------------------------------- RngStream

def test_stream_is_pure_function_of_coordinates():
    g = TimeGrid(1.0, 16)
    s = RngStream(42)
    dB_all, dY = s.scenario_increments(g, 3, 10)
    dB_7, dY_7 = s.brownian_increments(g, 3, 7)
    np.testing.assert_array_equal(dB_all[7], dB_7)
    np.testing.assert_array_equal(dY, dY_7)
    # more particles does not change earlier rows
    dB_more, _ = s.scenario_increments(g, 3, 50)
    np.testing.assert_array_equal(dB_more[:10], dB_all)


def test_stream_channels_and_scenarios_differ():
    g = TimeGrid(1.0, 16)
    s = RngStream(1)
    a, ya = s.scenario_increments(g, 0, 2)
    b, yb = s.scenario_increments(g, 1, 2)
    assert not np.allclose(a, b)
    assert not np.allclose(ya, yb)
    assert not np.allclose(a[0], ya)


def test_substeps_share_brownian_path():
    coarse = RngStream(9, substeps=2).scenario_increments(TimeGrid(1.0, 8), 0, 3)
    fine = RngStream(9, substeps=1).scenario_increments(TimeGrid(1.0, 16), 0, 3)
    np.testing.assert_allclose(coarse[0], fine[0].reshape(3, 8, 2).sum(axis=2), rtol=0, atol=1e-14)
    np.testing.assert_allclose(coarse[1], fine[1].reshape(8, 2).sum(axis=1), rtol=0, atol=1e-14)


def test_stream_variance():
    g = TimeGrid(2.0, 50)
    dB, _ = RngStream(5).scenario_increments(g, 0, 4000)
    assert dB.var() == pytest.approx(g.dt, rel=0.03)


def test_stream_accepts_full_u64_seed():
    RngStream(2**64 - 1).scenario_increments(TimeGrid(1.0, 4), 0, 1)
    with pytest.raises(InvalidInputError):
        RngStream(2**64)


# ------------------------------------------------------------ EmpiricalLaw

def test_law_sorted_and_normalized():
    law = EmpiricalLaw([3.0, 1.0, 2.0], [1.0, 1.0, 2.0])
    np.testing.assert_array_equal(law.samples, [1.0, 2.0, 3.0])
    np.testing.assert_allclose(law.weights, [0.25, 0.5, 0.25])
    assert law.cdf[-1] == 1.0
    assert law.mean() == pytest.approx(2.0)


def test_quantile_left_continuous():
    law = EmpiricalLaw([0.0, 1.0])
    assert law.quantile(0.5) == 0.0
    assert law.quantile(0.5000001) == 1.0
    assert law.quantile(1e-12) == 0.0


@pytest.mark.parametrize("bad", [[], [np.nan], [np.inf]])
def test_law_rejects(bad):
    with pytest.raises(InvalidInputError):
        EmpiricalLaw(bad)


def test_law_rejects_bad_weights():
    with pytest.raises(InvalidInputError):
        EmpiricalLaw([1.0, 2.0], [1.0, -1.0])
    with pytest.raises(InvalidInputError):
        EmpiricalLaw([1.0, 2.0], [0.0, 0.0])


# -------------------------------------------------------------- Wasserstein

def test_w_examples():
    assert wasserstein_1d(EmpiricalLaw.dirac(0.0), EmpiricalLaw.dirac(3.0), 2) == pytest.approx(3.0)
    a = EmpiricalLaw([0.0, 1.0])
    assert wasserstein_1d(a, EmpiricalLaw([2.0, 3.0]), 1) == pytest.approx(2.0)
    assert wasserstein_1d(a, EmpiricalLaw([0.0, 1.0]), 2) == 0.0


@settings(max_examples=60, deadline=None)
@given(samples, samples)
def test_w1_matches_scipy(x, y):
    got = wasserstein_1d(EmpiricalLaw(x), EmpiricalLaw(y), 1)
    assert got == pytest.approx(wasserstein_distance(x, y), rel=1e-9, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_w2_matches_quantile_integral(data):
    x = data.draw(samples)
    y = data.draw(samples)
    a = EmpiricalLaw(x, data.draw(weights_for(len(x))))
    b = EmpiricalLaw(y, data.draw(weights_for(len(y))))
    assert wasserstein_1d(a, b, 2) == pytest.approx(w2_oracle(a, b), rel=1e-3, abs=1e-3)


@settings(max_examples=60, deadline=None)
@given(samples, samples, samples)
def test_w2_is_a_metric(x, y, z):
    a, b, c = EmpiricalLaw(x), EmpiricalLaw(y), EmpiricalLaw(z)
    ab = wasserstein_1d(a, b, 2)
    assert ab >= 0
    assert ab == pytest.approx(wasserstein_1d(b, a, 2), abs=1e-12)
    assert ab <= wasserstein_1d(a, c, 2) + wasserstein_1d(c, b, 2) + 1e-9
    assert wasserstein_1d(a, a, 2) == 0.0


@settings(max_examples=60, deadline=None)
@given(samples, finite)
def test_w_translation(x, s):
    a = EmpiricalLaw(x)
    b = EmpiricalLaw(np.asarray(x) + s)
    assert wasserstein_1d(a, b, 2) == pytest.approx(abs(s), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(samples, samples, st.floats(0.0, 1.0))
def test_quantile_mix_geodesic(x, y, lam):
    a, b = EmpiricalLaw(x), EmpiricalLaw(y)
    m = quantile_mix(a, b, lam)
    d = wasserstein_1d(a, b, 2)
    assert wasserstein_1d(a, m, 2) == pytest.approx(lam * d, abs=1e-7)
    assert wasserstein_1d(m, b, 2) == pytest.approx((1 - lam) * d, abs=1e-7)


def test_quantile_mix_endpoints():
    a, b = EmpiricalLaw([0.0, 2.0]), EmpiricalLaw([5.0, 7.0, 9.0])
    assert wasserstein_1d(quantile_mix(a, b, 0.0), a, 2) == 0.0
    assert wasserstein_1d(quantile_mix(a, b, 1.0), b, 2) == 0.0


# ------------------------------------------------------------- law flows

def test_flow_sup_over_time():
    g = TimeGrid(1.0, 2)
    a = MarginalLawFlow.from_samples(g, np.zeros((3, 4)))
    paths = np.zeros((3, 4))
    paths[1] += 0.5
    paths[2] += 2.0
    b = MarginalLawFlow.from_samples(g, paths)
    assert wasserstein_flow(a, b, 2) == pytest.approx(2.0)


def test_flow_grid_mismatch():
    a = MarginalLawFlow.dirac(TimeGrid(1.0, 4), 0.0)
    b = MarginalLawFlow.dirac(TimeGrid(1.0, 5), 0.0)
    with pytest.raises(InvalidInputError):
        wasserstein_flow(a, b)


def test_flow_mix_and_moments():
    g = TimeGrid(1.0, 3)
    a = MarginalLawFlow.dirac(g, 0.0)
    b = MarginalLawFlow.dirac(g, 2.0)
    m = a.mix(b, 0.25)
    np.testing.assert_allclose(m.means(), 0.5)
    np.testing.assert_allclose(b.fourth_moments(), 16.0)


# ------------------------------------------------------------ path space

def brute_force_pathspace(a, b):
    best = np.inf
    for perm in itertools.permutations(range(len(a))):
        cost = np.mean([np.max(np.abs(a[i] - b[j])) ** 2 for i, j in enumerate(perm)])
        best = min(best, cost)
    return np.sqrt(best)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6))
def test_pathspace_matches_brute_force(seed, m):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, 5))
    b = rng.normal(size=(m, 5))
    assert wasserstein_pathspace(a, b, 2) == pytest.approx(brute_force_pathspace(a, b), rel=1e-12)


def test_pathspace_dominates_marginal_sup():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(20, 6))
    b = rng.normal(size=(20, 6))
    g = TimeGrid(1.0, 5)
    flows = MarginalLawFlow.from_paths(g, a), MarginalLawFlow.from_paths(g, b)
    assert wasserstein_pathspace(a, b) >= wasserstein_flow(*flows) - 1e-12


def test_pathspace_capacity():
    a = np.zeros((513, 3))
    with pytest.raises(CapacityError):
        wasserstein_pathspace(a, a)
