"""Cost, variational processes, adjoint BSDE, maximum-principle gradient and
the projected-gradient optimizer.

Conventions. J = mean over particles of Phi_bar(X_T) + sum_k f_bar_k dt,
with mean-field arguments averaged over the law of the conditional mean
(scenario values of U weighted by S0). With ``cost_measure="pu"`` every
particle's integrand is additionally weighted by its likelihood L_T.

The adjoint is computed in two layers. A reverse sweep of the discrete
scheme yields pathwise multipliers (lambda for X, rho for log L) whose
conditional expectations are the adjoint processes. Least-squares
regression on a feature basis then produces p, q, q~, Q, M, M~:

    p_k  = E[lambda_k | F_k]               Q_k  = E[rho_k / L_k | F_k]
    q_k  = E[lambda_{k+1} dB_k | F_k]/dt   M_k  = E[(rho/L)_{k+1} dB_k | F_k]/dt
    q~_k = E[lambda_{k+1} dY_k | F_k]/dt   M~_k = E[(rho/L)_{k+1} dY_k | F_k]/dt

with p_n = xi and Q_n = Theta imposed. The gradient of J along a control
direction v - u is E sum_k (q_k C_sigma + C_f)(v_k - u_k) dt.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _engine
from .errors import InvalidInputError, StaleLawError
from .fixed_point import fixed_point_residual, solve_coupled
from .numerics import MarginalLawFlow, RngStream, TimeGrid, wasserstein_flow
from .policy import ControlPolicy, LinearPolicy, perturb
from .simulator import ScenarioEnsemble, draw_noise

DEFAULT_BASIS = ("1", "X", "X2", "L", "LX", "U", "Y", "a")
PROCESSES = ("p", "q", "qt", "Q", "Mq", "Mqt")


@dataclass(frozen=True)
class CostEstimate:
    value: float
    stderr: float


def _setup(ens, workers):
    return _engine.Setup(ens.model, ens.grid, ens.M, ens.N, workers)


def cost(c, policy, mu_star: MarginalLawFlow | None, ens: ScenarioEnsemble,
         cost_measure: str = "q0", tol: float = 1e-2) -> CostEstimate:
    """J with its standard error over scenarios.

    ``ens`` must sit at the fixed point of ``policy``: either a coupled run,
    or a run driven by ``mu_star`` whose own conditional-mean law is within
    ``tol`` of ``mu_star``.
    """
    if c is not ens.model or policy is not ens.policy:
        raise InvalidInputError("ensemble was simulated with a different model or policy")
    if not ens.coupled:
        if mu_star is None or mu_star is not ens.input_flow:
            raise StaleLawError("ensemble was not driven by the supplied law flow")
        gap = wasserstein_flow(mu_star, ens.law_flow(), 2)
        if gap > tol:
            raise StaleLawError(f"law flow is {gap:.3e} away from its image (tol {tol})")
    with _engine.Workers(1) as w:
        J, se, _ = _engine.cost_value(_setup(ens, w), ens._traj, cost_measure)
    return CostEstimate(J, se)


def _controls(policy, ens):
    z = policy.values(ens.grid, ens.Y)
    if z.shape != (ens.M, ens.grid.n):
        raise InvalidInputError("policy does not match the ensemble")
    return z


# ------------------------------------------------------------- variational

@dataclass(eq=False)
class VariationalPair:
    """K and R = L * dlogL along the direction v - u, each of shape (n+1, M, N)."""

    K: np.ndarray
    R: np.ndarray
    dlogL: np.ndarray
    u: ControlPolicy
    v: ControlPolicy
    d_terminal: float
    d_running: float

    @property
    def dJ(self) -> float:
        """Directional derivative of J from the linearized dynamics."""
        return self.d_terminal + self.d_running


def solve_variational(c, u: ControlPolicy, v: ControlPolicy, mu_star, ens: ScenarioEnsemble,
                      stream: RngStream | None = None, cost_measure: str = "q0",
                      threads=None, direction=None) -> VariationalPair:
    """Linearize the fixed-point system at ``ens`` along v - u.

    The law responds to the perturbation through both the conditional means
    and their likelihood weights. ``direction`` may supply an (M, n) array of
    control increments in place of v - u.
    """
    if ens.resampled:
        raise InvalidInputError("variational processes need persistent particle identities")
    dz = _controls(v, ens) - _controls(u, ens) if direction is None else np.asarray(direction)
    with _engine.Workers(threads) as w:
        out = _engine.tangent(_setup(ens, w), ens._traj, np.ascontiguousarray(dz.T),
                              cost_measure)
    shape = (ens.grid.n + 1, ens.M, ens.N)
    K = out["K"].reshape(shape)
    dl = out["dlogL"].reshape(shape)
    return VariationalPair(K, np.exp(ens.logL) * dl, dl, u, v, out["dterminal"], out["drunning"])


# ----------------------------------------------------------------- adjoint

def basis_features(ens: ScenarioEnsemble, k: int, names=DEFAULT_BASIS) -> np.ndarray:
    """Regression design at t_k, shape (P, len(names))."""
    X = ens.X[k].reshape(-1)
    L = np.exp(ens.logL[k].reshape(-1))
    cols = []
    for name in names:
        if name == "1":
            cols.append(np.ones_like(X))
        elif name == "X":
            cols.append(X)
        elif name == "X2":
            cols.append(X * X)
        elif name == "L":
            cols.append(L)
        elif name == "LX":
            cols.append(L * X)
        elif name == "U":
            cols.append(np.repeat(ens.U[k], ens.N))
        elif name == "Y":
            cols.append(np.repeat(ens.Y[:, k], ens.N))
        elif name == "a":
            W = ens.model.kernel_sigma.weights(ens.grid)
            cols.append(W[k, :k + 1] @ ens.X[:k + 1].reshape(k + 1, -1))
        else:
            raise InvalidInputError(f"unknown basis feature {name!r}")
    return np.stack(cols, axis=1)


def _regress(B, T, ridge):
    """Least squares of targets T (P, r) on design B (P, b).

    Columns are centred and scaled; constant columns are absorbed by the
    intercept. Returns (fitted values, coefficients in the original columns,
    residual RMS per target, whether the ridge fallback was used).
    """
    mean = B.mean(axis=0)
    scale = B.std(axis=0)
    varying = scale > 1e-12 * np.maximum(1.0, np.abs(mean))
    Z = (B[:, varying] - mean[varying]) / scale[varying]
    tbar = T.mean(axis=0)
    Tc = T - tbar
    used_ridge = False
    if Z.shape[1]:
        beta, _, rank, _ = np.linalg.lstsq(Z, Tc, rcond=None)
        if rank < Z.shape[1]:
            used_ridge = True
            G = Z.T @ Z / Z.shape[0]
            beta = np.linalg.solve(G + ridge * np.eye(G.shape[0]), Z.T @ Tc / Z.shape[0])
        fit = Z @ beta + tbar
    else:
        beta = np.zeros((0, T.shape[1]))
        fit = np.broadcast_to(tbar, T.shape).copy()
    coef = np.zeros((B.shape[1], T.shape[1]))
    raw = beta / scale[varying][:, None]
    coef[varying] = raw
    intercept = tbar - mean[varying] @ raw
    const_cols = np.flatnonzero(~varying)
    if const_cols.size:
        # put the intercept on the first constant column (the "1" column when present)
        j = const_cols[0]
        coef[j] = intercept / mean[j] if mean[j] != 0 else 0.0
    rms = np.sqrt(np.mean((T - fit) ** 2, axis=0))
    return fit, coef, rms, used_ridge


@dataclass(eq=False)
class AdjointSolution:
    """Regression-represented adjoint processes.

    ``values[name]`` has shape (n+1, M, N) for p and Q and (n, M, N) for the
    integrands q, qt (q~), Mq (M) and Mqt (M~). ``coef[name]`` holds the
    regression coefficients per step on ``basis``.
    """

    basis: tuple
    coef: dict
    values: dict
    xi: np.ndarray
    Theta: np.ndarray
    lam: np.ndarray = field(repr=False)
    rho: np.ndarray = field(repr=False)
    zbar: np.ndarray = field(repr=False)
    Csig: np.ndarray = field(repr=False)
    Cf: np.ndarray = field(repr=False)
    cost_weights: np.ndarray = field(repr=False)
    residual_rms: dict = field(default_factory=dict)
    unexplained_fraction: np.ndarray | None = None
    ridge_steps: int = 0
    cost_measure: str = "q0"

    def process(self, name):
        return self.values[name]


def solve_adjoint(c, u: ControlPolicy, mu_star, ens: ScenarioEnsemble, basis=DEFAULT_BASIS,
                  cost_measure: str = "q0", ridge: float = 1e-8, threads=None) -> AdjointSolution:
    """Backward induction for the adjoint pair with regression projections."""
    if ens.resampled:
        raise InvalidInputError("adjoint needs persistent particle identities; "
                                "resampled ensembles are not supported")
    if u is not ens.policy:
        raise InvalidInputError("ensemble was simulated with a different policy")
    basis = tuple(basis)
    n, M, N = ens.grid.n, ens.M, ens.N
    P, dt = M * N, ens.grid.dt
    with _engine.Workers(threads) as w:
        adj = _engine.adjoint(_setup(ens, w), ens._traj, cost_measure)
    lam, rho = adj["lam"], adj["rho"]
    logL = ens._traj["logL"]
    dB, dY = ens._traj["dB"], ens._traj["dY"]
    lam_L = rho * np.exp(-logL)
    values = {"p": np.empty((n + 1, P)), "Q": np.empty((n + 1, P))}
    for name in ("q", "qt", "Mq", "Mqt"):
        values[name] = np.empty((n, P))
    coef = {name: np.zeros((n + 1 if name in ("p", "Q") else n, len(basis))) for name in PROCESSES}
    rms = {name: np.zeros(n) for name in PROCESSES}
    unexplained = np.zeros(n)
    ridge_steps = 0
    values["p"][n] = lam[n]
    values["Q"][n] = lam_L[n]
    for k in range(n):
        B = basis_features(ens, k, basis)
        dYp = np.repeat(dY[k], N)
        T = np.stack([lam[k], lam[k + 1] * dB[k] / dt, lam[k + 1] * dYp / dt,
                      lam_L[k], lam_L[k + 1] * dB[k] / dt, lam_L[k + 1] * dYp / dt], axis=1)
        fit, cf, rr, used = _regress(B, T, ridge)
        ridge_steps += used
        for j, name in enumerate(("p", "q", "qt", "Q", "Mq", "Mqt")):
            values[name][k] = fit[:, j]
            coef[name][k] = cf[:, j]
            rms[name][k] = rr[j]
        spread = float(np.std(lam[k]))
        # share of the pathwise multiplier the basis fails to explain
        unexplained[k] = rr[0] / spread if spread > 0 else 0.0
    if ridge_steps:
        warnings.warn(f"rank-deficient regression at {ridge_steps} steps; ridge {ridge:g} used",
                      RuntimeWarning, stacklevel=2)
    shape_full, shape_int = (n + 1, M, N), (n, M, N)
    vals = {k: v.reshape(shape_full if k in ("p", "Q") else shape_int) for k, v in values.items()}
    return AdjointSolution(basis=basis, coef=coef, values=vals, xi=lam[n].reshape(M, N),
                           Theta=lam_L[n].reshape(M, N), lam=lam, rho=rho, zbar=adj["zbar"],
                           Csig=adj["Csig"], Cf=adj["Cf"], cost_weights=adj["cost_weights"],
                           residual_rms=rms, unexplained_fraction=unexplained, ridge_steps=ridge_steps,
                           cost_measure=cost_measure)


# ---------------------------------------------------------------- gradient

@dataclass(eq=False)
class GradientReport:
    integrand: np.ndarray
    gradient: np.ndarray
    pathwise_gradient: np.ndarray
    fd_gradient: np.ndarray | None = None
    cosine: float | None = None
    relative_error: float | None = None
    duality_defect: float | None = None


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def hamiltonian_integrand(adj: AdjointSolution, ens: ScenarioEnsemble) -> np.ndarray:
    """G_k = q_k C_sigma + C_f per particle, shape (n, M, N)."""
    n = ens.grid.n
    q = adj.values["q"].reshape(n, -1)
    G = q * adj.Csig + adj.cost_weights * adj.Cf
    return G.reshape(n, ens.M, ens.N)


def smp_gradient(c, u: LinearPolicy, mu_star, ens: ScenarioEnsemble, adj: AdjointSolution,
                 fd: bool = False, fd_step: float = 1e-3, stream: RngStream | None = None,
                 threads=None) -> GradientReport:
    """Parameter gradient of J from the maximum-principle integrand.

    g_j = (1/MN) sum_{k,m,i} G_k^{m,i} psi_j(t_k, Y^m) dt over unclipped
    (k, m). ``pathwise_gradient`` uses the unprojected multipliers instead of
    q and is the exact derivative of the discrete estimator. With ``fd`` the
    central-difference gradient on fresh coupled solves is attached.
    """
    grid = ens.grid
    G = hamiltonian_integrand(adj, ens)
    psi = u.features_on(grid, ens.Y)
    act = u.active(grid, ens.Y)
    Gs = G.sum(axis=2).T * act
    P = ens.M * ens.N
    grad = np.einsum("mk,mkj->j", Gs, psi) * grid.dt / P
    pw = np.einsum("mk,mkj->j", adj.zbar.T * act, psi) / P
    rep = GradientReport(G, grad, pw)
    if fd:
        rep.fd_gradient = fd_gradient(c, u, grid, ens.M, ens.N, stream, fd_step, threads,
                                      noise=(ens._traj["dB"], ens._traj["dY"]),
                                      cost_measure=adj.cost_measure)
        rep.cosine = _cosine(grad, rep.fd_gradient)
        rep.relative_error = float(np.linalg.norm(grad - rep.fd_gradient)
                                   / max(np.linalg.norm(rep.fd_gradient), 1e-300))
    return rep


def fd_gradient(c, u: LinearPolicy, grid, M, N, stream, step=1e-3, threads=None, noise=None,
                cost_measure="q0") -> np.ndarray:
    """Central differences of J in each policy parameter, common random numbers."""
    theta = np.asarray(u.theta)
    out = np.empty_like(theta)
    for j in range(theta.size):
        vals = []
        for sgn in (1.0, -1.0):
            th = theta.copy()
            th[j] += sgn * step
            vals.append(evaluate(c, u.with_theta(th), grid, M, N, stream, threads, noise,
                                 cost_measure).value)
        out[j] = (vals[0] - vals[1]) / (2 * step)
    return out


def evaluate(c, policy, grid, M, N, stream, threads=None, noise=None, cost_measure="q0"):
    """J at the exact discrete fixed point of ``policy``."""
    ens = solve_coupled(c, policy, grid, M, N, stream, threads, noise)
    with _engine.Workers(1) as w:
        J, se, _ = _engine.cost_value(_setup(ens, w), ens._traj, cost_measure)
    return CostEstimate(J, se)


def adjoint_directional(adj: AdjointSolution, ens: ScenarioEnsemble, dz: np.ndarray,
                        projected: bool = True) -> float:
    """dJ along control increments dz of shape (M, n), from the adjoint side."""
    if projected:
        G = hamiltonian_integrand(adj, ens).sum(axis=2)
        return float((G * dz.T).sum() * ens.grid.dt / (ens.M * ens.N))
    return float((adj.zbar * dz.T).sum() / (ens.M * ens.N))


def terminal_pairing(adj: AdjointSolution, var: VariationalPair) -> float:
    """E0[xi K_T] + E0[Theta R_T]."""
    return float(np.mean(adj.xi * var.K[-1] + adj.Theta * var.R[-1]))


@dataclass
class DualityReport:
    terminal_pairing: float
    running_linearization: float
    tangent_derivative: float
    adjoint_derivative: float
    fd_derivative: float
    fd_values: dict
    defect_fd: float
    defect_adjoint: float


def duality_check(c, u: ControlPolicy, v: ControlPolicy, ens: ScenarioEnsemble,
                  adj: AdjointSolution, stream: RngStream, thetas=(0.1, 0.05),
                  cost_measure="q0", threads=None) -> DualityReport:
    """Compare the linearized derivative of J along v - u with difference
    quotients (J(u + theta(v - u)) - J(u))/theta, Richardson-extrapolated over
    the two thetas, and with the adjoint-side derivative."""
    var = solve_variational(c, u, v, None, ens, stream, cost_measure, threads)
    noise = (ens._traj["dB"], ens._traj["dY"])
    with _engine.Workers(1) as w:
        J0 = _engine.cost_value(_setup(ens, w), ens._traj, cost_measure)[0]
    quot = {}
    for th in thetas:
        Jt = evaluate(c, perturb(u, v, th), ens.grid, ens.M, ens.N, stream, threads, noise,
                      cost_measure).value
        quot[th] = (Jt - J0) / th
    t1, t2 = thetas[0], thetas[-1]
    fd = quot[t2] + (quot[t2] - quot[t1]) * t2 / (t1 - t2) if t1 != t2 else quot[t1]
    dz = _controls(v, ens) - _controls(u, ens)
    adj_d = adjoint_directional(adj, ens, dz, projected=True)
    tp = terminal_pairing(adj, var)
    return DualityReport(terminal_pairing=tp, running_linearization=var.d_running,
                         tangent_derivative=var.dJ, adjoint_derivative=adj_d, fd_derivative=fd,
                         fd_values=quot,
                         defect_fd=abs(var.dJ - fd) / (abs(fd) + 1e-8),
                         defect_adjoint=abs(adj_d - var.dJ) / (abs(var.dJ) + 1e-8))


# --------------------------------------------------------------- optimizer

TRACE_COLUMNS = ("iteration", "J", "J_stderr", "grad_norm", "step", "duality_defect",
                 "fixpoint_residual")


@dataclass(eq=False)
class OptimizationResult:
    policy: LinearPolicy
    J: float
    J_stderr: float
    trace: list
    converged: bool
    ensemble: ScenarioEnsemble = field(repr=False, default=None)
    failed_steps: list = field(default_factory=list)
    adjoint: AdjointSolution | None = field(repr=False, default=None)


def _gram(u, grid, Y):
    psi = u.features_on(grid, Y).reshape(-1, len(u.theta))
    G = psi.T @ psi / psi.shape[0]
    return G + 1e-10 * np.trace(G) * np.eye(G.shape[0])


def optimize(c, u0: LinearPolicy, grid: TimeGrid, M: int, N: int, stream: RngStream,
             max_iter: int = 30, step0: float = 1.0, armijo: float = 1e-4, shrink: float = 0.5,
             max_halvings: int = 20, gtol: float = 1e-6, xtol: float = 1e-8, precondition: bool = True,
             theta_bounds=None, basis=DEFAULT_BASIS, cost_measure: str = "q0",
             check_fixpoint: bool = True, fixpoint_tol: float = 1e-6,
             threads=None) -> OptimizationResult:
    """Projected gradient descent on the policy parameters with Armijo backtracking.

    Every cost evaluation is an exact discrete fixed point driven by the same
    noise, so accepted steps never increase the reported J. The search
    direction is the maximum-principle gradient, optionally preconditioned by
    the Gram matrix of the policy features. ``theta_bounds`` is an optional
    (lo, hi) box onto which parameters are projected.

    Iteration stops when the gradient norm is at most ``gtol`` or an accepted
    step moves the parameters by at most ``xtol`` relative to their size.
    A line search that fails after ``max_halvings`` reductions is recorded in
    ``failed_steps`` and the base step is halved for the next iteration.
    Row k of the trace describes iterate k and the step that produced it.
    """
    with _engine.Workers(threads) as w:
        noise = draw_noise(stream, grid, M, N, w)

    def project(th):
        if theta_bounds is None:
            return th
        return np.clip(th, theta_bounds[0], theta_bounds[1])

    def solve(pol):
        ens = solve_coupled(c, pol, grid, M, N, stream, threads, noise)
        with _engine.Workers(1) as w:
            J, se, _ = _engine.cost_value(_setup(ens, w), ens._traj, cost_measure)
        return ens, J, se

    u = u0.with_theta(project(np.asarray(u0.theta, dtype=float)))
    ens, J, se = solve(u)
    Gm = _gram(u, grid, ens.Y) if precondition else None
    trace, failed = [], []
    base, step = step0, 0.0
    converged = False
    adj = adj_policy = None
    small = False
    for it in range(max_iter):
        adj, adj_policy = solve_adjoint(c, u, None, ens, basis, cost_measure, threads=threads), u
        rep = smp_gradient(c, u, None, ens, adj)
        g = rep.gradient
        gnorm = float(np.linalg.norm(g))
        defect = float(np.linalg.norm(g - rep.pathwise_gradient)
                       / max(np.linalg.norm(rep.pathwise_gradient), 1e-300))
        resid = 0.0
        if check_fixpoint:
            resid = fixed_point_residual(c, u, ens, stream, threads)
            if resid > fixpoint_tol:
                raise StaleLawError(f"fixed point residual {resid:.3e} at iteration {it}")
        trace.append((it, J, se, gnorm, step, defect, resid))
        if gnorm <= gtol or small:
            converged = True
            break
        d = np.linalg.solve(Gm, g) if Gm is not None else g
        theta = np.asarray(u.theta, dtype=float)
        s = 2.0 * step if step > 0 else base
        step = 0.0
        for _ in range(max_halvings):
            cand = project(theta - s * d)
            decrease = float(g @ (theta - cand))
            if decrease > 0:
                v = u.with_theta(cand)
                ens_v, Jv, sev = solve(v)
                if Jv <= J - armijo * decrease:
                    small = np.linalg.norm(cand - theta) <= xtol * (1.0 + np.linalg.norm(theta))
                    u, ens, J, se, step = v, ens_v, Jv, sev, s
                    break
            s *= shrink
        if step == 0.0:
            failed.append(it)
            base *= 0.5
    if adj is None or adj_policy is not u:
        adj = solve_adjoint(c, u, None, ens, basis, cost_measure, threads=threads)
    return OptimizationResult(u, J, se, trace, converged, ens, failed, adj)


def smp_condition(adj: AdjointSolution, ens: ScenarioEnsemble, u: ControlPolicy):
    """Averaged pointwise maximum-principle gap and its standard error.

    For each scenario and step the scenario-averaged integrand G is paired
    with the worst admissible deviation: min over v in U of G (v - u_k). The
    returned value is the scenario mean of sum_k min(...) dt, which is <= 0
    and should be within Monte Carlo error of 0 at an optimum.
    """
    G = hamiltonian_integrand(adj, ens).mean(axis=2).T
    z = _controls(u, ens)
    worst = np.minimum(G * (u.u_min - z), G * (u.u_max - z))
    per = worst.sum(axis=1) * ens.grid.dt
    return float(per.mean()), float(per.std(ddof=1) / math.sqrt(ens.M))


def conditional_mean_derivative(var: VariationalPair, ens: ScenarioEnsemble) -> np.ndarray:
    """Derivative of U along the variational direction, shape (n+1, M).

    Differentiating U = E0[L X | Y] / E0[L | Y] gives
    (E0[L K + R X | Y] - U E0[R | Y]) / S0.
    """
    L = np.exp(ens.logL)
    num = (L * var.K + var.R * ens.X).mean(axis=2)
    return (num - ens.U * var.R.mean(axis=2)) / ens.S0
