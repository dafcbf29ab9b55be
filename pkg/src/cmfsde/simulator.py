"""Forward particle system on the reference measure and filter diagnostics.

Scenario m carries one observation path Y^(m); its N particles carry
independent B1 paths. The likelihood L = exp(int h dY - 1/2 int h^2 dt)
turns reference-measure averages into conditional expectations:
U = S / S0 with S = mean(L X), S0 = mean(L).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .errors import InvalidInputError
from .model import CoefficientSet
from .numerics import EmpiricalLaw, MarginalLawFlow, RngStream, TimeGrid
from .policy import ControlPolicy


def draw_noise(stream: RngStream, grid: TimeGrid, M: int, N: int, workers=None):
    """Increments dB of shape (n, M*N) and dY of shape (n, M)."""
    own = workers is None
    workers = workers or _engine.Workers(1)
    try:
        blocks = workers.map(lambda m: stream.scenario_increments(grid, m, N), range(M))
    finally:
        if own:
            workers.close()
    dB = np.ascontiguousarray(np.concatenate([b[0] for b in blocks], axis=0).T)
    dY = np.ascontiguousarray(np.stack([b[1] for b in blocks], axis=1))
    return dB, dY


def observation_paths(dY: np.ndarray) -> np.ndarray:
    """Y of shape (M, n+1) from increments of shape (n, M)."""
    Y = np.zeros((dY.shape[1], dY.shape[0] + 1))
    Y[:, 1:] = np.cumsum(dY.T, axis=1)
    return Y


@dataclass(eq=False)
class ScenarioEnsemble:
    """Result of one forward run. Arrays are read-only after construction.

    X, logL: (n+1, M, N). Y: (M, n+1). U, S, S0, ess, law_weights: (n+1, M).
    controls: (M, n) policy values at the left grid points.
    law_weights are the S0-proportional weights under which the scenario
    values of U form the law of the conditional mean.
    """

    grid: TimeGrid
    M: int
    N: int
    Y: np.ndarray
    X: np.ndarray
    logL: np.ndarray
    U: np.ndarray
    S: np.ndarray
    S0: np.ndarray
    ess: np.ndarray
    law_weights: np.ndarray
    controls: np.ndarray
    coupled: bool
    model: CoefficientSet = field(repr=False)
    policy: ControlPolicy = field(repr=False)
    input_flow: MarginalLawFlow | None = field(repr=False, default=None)
    resampled: bool = False
    _traj: dict = field(repr=False, default=None)

    def __post_init__(self):
        for name in ("Y", "X", "logL", "U", "S", "S0", "ess", "law_weights", "controls"):
            getattr(self, name).flags.writeable = False

    @property
    def P(self) -> int:
        return self.M * self.N

    @property
    def L(self) -> np.ndarray:
        return np.exp(self.logL)

    def law_flow(self) -> MarginalLawFlow:
        """Law of the conditional mean: scenario values of U with S0 weights."""
        return MarginalLawFlow(self.grid, tuple(EmpiricalLaw(u, w) for u, w
                                                in zip(self.U, self.law_weights)))

    def terminal_cost(self) -> np.ndarray:
        return self._traj["terminal"].reshape(self.M, self.N)

    def running_cost(self) -> np.ndarray:
        return self._traj["running"].reshape(self.M, self.N)


def _ensemble(setup, traj, policy, Y, flow):
    n, M, N = setup.grid.n, setup.M, setup.N
    shape = (n + 1, M, N)
    return ScenarioEnsemble(
        grid=setup.grid, M=M, N=N, Y=Y, X=traj["X"].reshape(shape),
        logL=traj["logL"].reshape(shape), U=traj["U"], S=traj["S"], S0=traj["S0"],
        ess=traj["ess"], law_weights=traj["w"], controls=np.ascontiguousarray(traj["z"].T),
        coupled=flow is None, model=setup.model, policy=policy, input_flow=flow, _traj=traj)


def run(c: CoefficientSet, policy: ControlPolicy, mu: MarginalLawFlow | None, grid: TimeGrid,
        M: int, N: int, stream: RngStream, threads=None, noise=None,
        with_cost=True) -> ScenarioEnsemble:
    """Shared driver. ``mu=None`` means the law is taken from the run itself."""
    if mu is not None and mu.grid != grid:
        raise InvalidInputError("input flow lives on a different grid")
    with _engine.Workers(threads) as workers:
        setup = _engine.Setup(c, grid, M, N, workers)
        dB, dY = noise if noise is not None else draw_noise(stream, grid, M, N, workers)
        Y = observation_paths(dY)
        z = policy.values(grid, Y)
        if z.shape != (M, grid.n):
            raise InvalidInputError(f"policy returned shape {z.shape}, expected {(M, grid.n)}")
        z = np.ascontiguousarray(z.T)
        traj = _engine.forward(setup, z, dB, dY, flow=mu, with_cost=with_cost)
    traj.update(dB=dB, dY=dY, z=z)
    return _ensemble(setup, traj, policy, Y, mu)


def simulate(c: CoefficientSet, policy: ControlPolicy, mu: MarginalLawFlow, grid: TimeGrid,
             M: int, N: int, stream: RngStream, threads=None, noise=None) -> ScenarioEnsemble:
    """Euler-Maruyama run of (X, log L) with the input law flow ``mu``."""
    if mu is None:
        raise InvalidInputError("simulate needs an input flow; use solve_coupled for the "
                                "self-consistent law")
    return run(c, policy, mu, grid, M, N, stream, threads, noise)


def conditional_moments(ens: ScenarioEnsemble, values: np.ndarray) -> np.ndarray:
    """Self-normalized estimate sum L g / sum L per scenario; values (n+1, M, N)."""
    lg = ens.logL
    wts = np.exp(lg - lg.max(axis=2, keepdims=True))
    return (wts * values).sum(axis=2) / wts.sum(axis=2)


def _h_on(ens: ScenarioEnsemble, c: CoefficientSet):
    t = ens.grid.times[:, None, None]
    return np.broadcast_to(np.asarray(c.h(t, ens.X), dtype=float), ens.X.shape)


def fkk_propagate(ens: ScenarioEnsemble, c: CoefficientSet) -> np.ndarray:
    """Conditional mean from the normalized-filter equation.

    dU = {pi(Xh) - pi(X)pi(h)} dY + {pi(X)pi(h)^2 - pi(Xh)pi(h)} dt, with
    particle estimates pi(.) at the left point. Returns (n+1, M).
    """
    h = _h_on(ens, c)
    pX = conditional_moments(ens, ens.X)
    ph = conditional_moments(ens, h)
    pXh = conditional_moments(ens, ens.X * h)
    dY = np.diff(ens.Y, axis=1).T
    dt = ens.grid.dt
    incr = (pXh[:-1] - pX[:-1] * ph[:-1]) * dY + (pX[:-1] * ph[:-1] ** 2 - pXh[:-1] * ph[:-1]) * dt
    out = np.empty_like(pX)
    out[0] = pX[0]
    out[1:] = pX[0] + np.cumsum(incr, axis=0)
    return out


def zakai_consistency(ens: ScenarioEnsemble, c: CoefficientSet) -> np.ndarray:
    """Per-scenario sup_t |S_t - U_t exp(int pi(h) dY - 1/2 int pi(h)^2 ds)|."""
    ph = conditional_moments(ens, _h_on(ens, c))
    dY = np.diff(ens.Y, axis=1).T
    expo = np.zeros_like(ph)
    expo[1:] = np.cumsum(ph[:-1] * dY - 0.5 * ph[:-1] ** 2 * ens.grid.dt, axis=0)
    return np.abs(ens.S - ens.U * np.exp(expo)).max(axis=0)


def martingale_check(ens: ScenarioEnsemble):
    """(|mean L_T - 1|, Monte Carlo standard error over scenarios)."""
    LT = np.exp(ens.logL[-1])
    per = LT.mean(axis=1)
    dev = abs(float(LT.mean()) - 1.0)
    return dev, float(per.std(ddof=1) / np.sqrt(ens.M))


def particle_expectation(ens: ScenarioEnsemble, g, k: int = -1) -> float:
    """(1/MN) sum L_k g(X_k): a model-measure expectation of g(X_{t_k})."""
    return float(np.mean(np.exp(ens.logL[k]) * g(ens.X[k])))
