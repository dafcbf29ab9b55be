"""Law fixed point mu = T(mu), where T(mu) is the law of the conditional mean
produced by running the particle system with input law mu.

Two routes reach the same discrete fixed point:
  picard_iterate  damped Picard iteration on law flows with common random
                  numbers, monitored in sup-over-time marginal W2.
  solve_coupled   a single forward pass in which the law at t_k is read off
                  the ensemble itself. With left-point evaluation the law at
                  t_k only involves states at t_k, so this pass is the exact
                  fixed point of the discrete map.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .errors import InvalidInputError
from .numerics import (MarginalLawFlow, PATHSPACE_CAP, RngStream, TimeGrid, wasserstein_flow,
                       wasserstein_pathspace)
from .simulator import draw_noise, run


@dataclass
class FixedPointReport:
    iterations: int
    evaluations: int
    distances: list
    residual: float
    fourth_moment_max: float
    converged: bool
    flow: MarginalLawFlow = field(repr=False)
    ensemble: object = field(repr=False, default=None)
    wallclock: list = field(default_factory=list, repr=False)
    residuals: list = field(default_factory=list, repr=False)
    fourth_moments: list = field(default_factory=list, repr=False)
    pathspace_w2: float | None = None  # between the last two images of T, when M is small

    def rows(self):
        """(evaluation, d_k, residual, fourth_moment_max, wallclock) per application of T."""
        return [(k + 1, self.distances[k], self.residuals[k], self.fourth_moments[k],
                 self.wallclock[k]) for k in range(len(self.distances))]


def apply_T(c, policy, mu: MarginalLawFlow, grid: TimeGrid, M: int, N: int, stream: RngStream,
            threads=None, noise=None, return_ensemble=False):
    """One application of the solution map with input flow mu."""
    ens = run(c, policy, mu, grid, M, N, stream, threads, noise, with_cost=False)
    flow = ens.law_flow()
    return (flow, ens) if return_ensemble else flow


def picard_iterate(c, policy, mu0: MarginalLawFlow | None, grid: TimeGrid, M: int, N: int,
                   stream: RngStream, damping: float = 1.0, tol: float = 1e-2, max_iter: int = 20,
                   threads=None, noise=None, pathspace=False) -> FixedPointReport:
    """mu_{k+1} = mix(mu_k, T(mu_k); damping) until W(mu_k, T(mu_k)) <= tol.

    W is the largest marginal W2 over the grid and d_k = W(mu_k, mu_{k+1});
    with damping 1 the two coincide. The returned flow is the last input
    flow, so ``residual`` is exactly W(flow, T(flow)) and ``ensemble`` is the
    run driven by that flow. ``iterations`` counts the updates applied;
    ``evaluations`` counts applications of T, including the one that
    certified convergence. Non-convergence is reported, not raised.
    """
    if not 0.0 < damping <= 1.0:
        raise InvalidInputError("damping must lie in (0, 1]")
    if tol <= 0 or max_iter < 1:
        raise InvalidInputError("need tol > 0 and max_iter >= 1")
    mu = mu0 if mu0 is not None else MarginalLawFlow.dirac(grid, c.x0)
    if noise is None:
        with _engine.Workers(threads) as workers:
            noise = draw_noise(stream, grid, M, N, workers)
    dists, resid, fourth, clock = [], [], [], []
    start = time.perf_counter()
    ens = prev = None
    converged = False
    for _ in range(max_iter):
        prev = ens
        image, ens = apply_T(c, policy, mu, grid, M, N, stream, threads, noise, True)
        r = wasserstein_flow(mu, image, 2)
        resid.append(r)
        fourth.append(float(image.fourth_moments().max()))
        if r <= tol:
            dists.append(r)
            clock.append(time.perf_counter() - start)
            converged = True
            break
        nxt = mu.mix(image, damping)
        dists.append(r if damping == 1.0 else wasserstein_flow(mu, nxt, 2))
        clock.append(time.perf_counter() - start)
        mu = nxt
    residual = resid[-1]
    flow = mu if converged else ens.input_flow
    pw = None
    if pathspace and M <= PATHSPACE_CAP and prev is not None:
        pw = pathspace_gap(prev, ens)
    return FixedPointReport(iterations=len(dists) - int(converged), evaluations=len(dists),
                            distances=dists, residual=residual,
                            fourth_moment_max=fourth[-1], converged=converged, flow=flow,
                            ensemble=ens, wallclock=clock, residuals=resid, fourth_moments=fourth,
                            pathspace_w2=pw)


def pathspace_gap(a, b) -> float:
    """Path-space W2 between the conditional-mean path laws of two ensembles.

    Each scenario's U path carries weight proportional to its terminal S0,
    which is the model-measure law of the whole path.
    """
    return wasserstein_pathspace(a.U.T, b.U.T, 2, a.law_weights[-1], b.law_weights[-1])


def solve_coupled(c, policy, grid: TimeGrid, M: int, N: int, stream: RngStream, threads=None,
                  noise=None, with_cost=True):
    """Ensemble at the exact discrete fixed point, in one forward pass."""
    return run(c, policy, None, grid, M, N, stream, threads, noise, with_cost=with_cost)


def fixed_point_residual(c, policy, ens, stream, threads=None) -> float:
    """W(mu, T(mu)) for the law carried by an ensemble, same noise."""
    mu = ens.law_flow()
    noise = (ens._traj["dB"], ens._traj["dY"])
    image = apply_T(c, policy, mu, ens.grid, ens.M, ens.N, stream, threads, noise)
    return wasserstein_flow(mu, image, 2)


def jensen_check(ens) -> bool:
    """Fourth moment of the U-law is at most the weighted fourth moment of X,
    time by time (conditional Jensen)."""
    L = np.exp(ens.logL)
    xw = (L * ens.X**4).mean(axis=2)
    lhs = (ens.law_weights * ens.U**4).sum(axis=1)
    rhs = (ens.law_weights * xw / ens.S0).sum(axis=1)
    return bool(np.all(lhs <= rhs * (1 + 1e-12) + 1e-300))
