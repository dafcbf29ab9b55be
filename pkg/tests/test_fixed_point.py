import numpy as np
import pytest

from cmfsde.errors import InvalidInputError
from cmfsde.fixed_point import (apply_T, fixed_point_residual, jensen_check, pathspace_gap,
                                picard_iterate, solve_coupled)
from cmfsde.model import builtin_model
from cmfsde.numerics import MarginalLawFlow, RngStream, TimeGrid, wasserstein_flow
from cmfsde.policy import LinearPolicy

G = TimeGrid(1.0, 20)
U0 = LinearPolicy.constant(0.0)
SIG = builtin_model("bounded_sigmoid")


def test_picard_reaches_coupled_solution():
    st = RngStream(11)
    rep = picard_iterate(SIG, U0, None, G, 8, 300, st, tol=1e-13, max_iter=30)
    assert rep.converged
    coupled = solve_coupled(SIG, U0, G, 8, 300, st, with_cost=False)
    np.testing.assert_allclose(rep.ensemble.U, coupled.U, rtol=0, atol=1e-12)
    assert rep.residual <= 1e-13


def test_coupled_run_is_a_fixed_point():
    st = RngStream(3)
    ens = solve_coupled(SIG, U0, G, 8, 300, st, with_cost=False)
    assert fixed_point_residual(SIG, U0, ens, st) < 1e-6


def test_residual_is_distance_to_image():
    st = RngStream(5)
    rep = picard_iterate(SIG, U0, None, G, 8, 200, st, tol=1e-2)
    image = apply_T(SIG, U0, rep.flow, G, 8, 200, st)
    assert rep.residual == pytest.approx(wasserstein_flow(rep.flow, image), abs=1e-15)
    assert rep.converged and rep.residual <= 1e-2


def test_no_meanfield_one_update():
    rep = picard_iterate(builtin_model("no_meanfield"), U0, None, G, 6, 200, RngStream(1))
    assert rep.converged
    assert rep.iterations == 1
    # weighted W2 between identical atoms sits at the square root of CDF round-off
    assert rep.residuals[-1] < 1e-8


def test_zero_diffusion_dirac_flow():
    c = builtin_model("bounded_sigmoid", sigma0=0.0)
    rep = picard_iterate(c, U0, None, G, 4, 50, RngStream(1))
    assert rep.converged and rep.iterations == 0
    dirac = MarginalLawFlow.dirac(G, c.x0)
    assert wasserstein_flow(rep.flow, dirac) == 0.0


def test_reproducible_given_seed():
    a = picard_iterate(SIG, U0, None, G, 6, 200, RngStream(21), tol=1e-4)
    b = picard_iterate(SIG, U0, None, G, 6, 200, RngStream(21), tol=1e-4)
    assert a.distances == b.distances
    assert a.residual == b.residual


def test_damped_iteration_converges():
    rep = picard_iterate(SIG, U0, None, G, 6, 200, RngStream(2), damping=0.5, tol=1e-4, max_iter=40)
    assert rep.converged
    # the damped step moves half way along the quantile geodesic
    assert rep.distances[0] == pytest.approx(0.5 * rep.residuals[0], rel=1e-9)


def test_non_convergence_is_reported():
    rep = picard_iterate(SIG, U0, None, G, 6, 200, RngStream(2), tol=1e-15, max_iter=1)
    assert not rep.converged
    assert rep.residual > 1e-15
    assert rep.iterations == 1 and rep.evaluations == 1


@pytest.mark.parametrize("kw", [dict(damping=0.0), dict(damping=1.5), dict(tol=0.0),
                                dict(max_iter=0)])
def test_bad_parameters(kw):
    with pytest.raises(InvalidInputError):
        picard_iterate(SIG, U0, None, G, 4, 10, RngStream(0), **kw)


def test_fourth_moments_and_jensen():
    st = RngStream(4)
    rep = picard_iterate(SIG, U0, None, G, 8, 300, st, tol=1e-6)
    assert np.isfinite(rep.fourth_moment_max)
    assert jensen_check(rep.ensemble)


def test_pathspace_reported_and_dominates_marginals():
    st = RngStream(7)
    rep = picard_iterate(SIG, U0, None, G, 8, 200, st, tol=1e-12, max_iter=3, pathspace=True)
    assert rep.pathspace_w2 is not None
    a = solve_coupled(SIG, U0, G, 8, 200, st, with_cost=False)
    b = solve_coupled(builtin_model("bounded_sigmoid", sigma0=0.6), U0, G, 8, 200, st,
                      with_cost=False)
    assert pathspace_gap(a, b) >= wasserstein_flow(a.law_flow(), b.law_flow()) - 1e-9


def test_rows_layout():
    rep = picard_iterate(SIG, U0, None, G, 4, 100, RngStream(1), tol=1e-6)
    rows = rep.rows()
    assert len(rows) == rep.evaluations
    assert [r[0] for r in rows] == list(range(1, rep.evaluations + 1))
