"""Particle sweeps shared by the simulator, the fixed-point solver and the
control module.

Layout: time runs along axis 0, particles p = m*N + i along axis 1. The law
of the conditional mean at step k is a weighted set of atoms; mean-field
coefficients are averaged over those atoms in fixed-size row chunks, so the
result does not depend on how many worker threads evaluate the chunks.

Three sweeps live here:
  forward   Euler-Maruyama for (X, log L) plus running/terminal cost.
  tangent   exact linearization of the forward sweep along a control
            direction; with a coupled law it differentiates through the
            law as well.
  adjoint   reverse-mode derivative of the discrete cost; its pathwise
            multipliers are the targets the BSDE regressions project.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DegeneracyError, InvalidInputError, NumericalBlowupError

CHUNK_ROWS = 4096


def resolve_threads(threads=None) -> int:
    if threads is None:
        threads = os.environ.get("CMFCTL_THREADS", 1)
    try:
        threads = int(threads)
    except (TypeError, ValueError):
        raise InvalidInputError(f"thread count must be an integer, got {threads!r}") from None
    if threads < 1:
        raise InvalidInputError("thread count must be >= 1")
    return threads


class Workers:
    """Runs chunk tasks in order; results are identical for any pool size."""

    def __init__(self, threads=None):
        self.threads = resolve_threads(threads)
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

    def map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def avg(F, w, rows):
    """Row-wise weighted average over atoms of a broadcastable (rows, A) array."""
    F = np.asarray(F, dtype=float)
    if F.ndim == 2 and F.shape[1] > 1:
        out = F @ w
    else:
        out = (F.reshape(-1) if F.ndim else F) * w.sum()
    return np.broadcast_to(out, (rows,))


def tsum(g, F, n_atoms):
    """sum_p g_p F[p, j] for a broadcastable (rows, A) array."""
    F = np.asarray(F, dtype=float)
    if F.ndim == 2 and F.shape[1] > 1:
        return g.sum() * F[0] if F.shape[0] == 1 else g @ F
    v = (g * F.reshape(-1)).sum() if F.ndim else g.sum() * F
    return np.full(n_atoms, float(v))


class GenericOps:
    """Law averages of a coefficient given as numpy callables.

    ``value(t, a, y, z)`` and ``jet(t, a, y, z) -> (value, d/da, d/dy, d/dz)``
    are evaluated on a (rows, atoms) layout.
    """

    def __init__(self, value, jet):
        self.value, self.jet = value, jet

    def mean(self, t, a, z, y, w):
        return avg(self.value(t, a[:, None], y[None, :], z[:, None]), w, a.size)

    def tangent(self, t, a, z, y, w, dw, wdU, da, dz):
        s, sa, sy, sz = self.jet(t, a[:, None], y[None, :], z[:, None])
        C = a.size
        return avg(s, dw, C) + avg(sy, wdU, C) + avg(sa, w, C) * da + avg(sz, w, C) * dz

    def adjoint(self, t, a, z, y, w, g):
        """(avg d/da, avg d/dz, sum_p g d/dy per atom, sum_p g value per atom)."""
        s, sa, sy, sz = self.jet(t, a[:, None], y[None, :], z[:, None])
        C, A = a.size, y.size
        return avg(sa, w, C), avg(sz, w, C), tsum(g, sy, A), tsum(g, s, A)


def sigma_ops(c):
    return c.sigma_ops if c.sigma_ops is not None else GenericOps(c.sigma, c.sigma_all)


def f_ops(c):
    return GenericOps(c.f, c.f_all)


def feature(W, has_memory, X, k):
    """a_k = sum_{j<=k} W[k, j] X_j."""
    if not has_memory:
        return W[k, k] * X[k]
    return W[k, :k + 1] @ X[:k + 1]


class Setup:
    """Static pieces of one (model, grid, M, N) configuration."""

    def __init__(self, model, grid, M, N, workers):
        if M < 2 or N < 2:
            raise InvalidInputError("need at least 2 scenarios and 2 particles")
        self.model, self.grid, self.M, self.N = model, grid, int(M), int(N)
        self.P = self.M * self.N
        self.workers = workers
        self.Ws = model.kernel_sigma.weights(grid)
        self.Wf = model.kernel_f.weights(grid)
        self.ms = model.kernel_sigma.has_memory
        self.mf = model.kernel_f.has_memory
        self.sops = sigma_ops(model)
        self.fops = f_ops(model)
        self.chunks = [(r, min(r + CHUNK_ROWS, self.P)) for r in range(0, self.P, CHUNK_ROWS)]

    def per_particle(self, v):
        return np.repeat(v, self.N)

    def scenario_sum(self, v):
        return v.reshape(self.M, self.N).sum(axis=1)


def scenario_stats(setup, logL_k, X_k):
    """Kallianpur-Striebel ratio and companions at one time.

    Returns S0, S, U, logS0, law weights w proportional to S0, and ess.
    """
    M, N = setup.M, setup.N
    lg = logL_k.reshape(M, N)
    x = X_k.reshape(M, N)
    L = np.exp(lg)
    S0 = L.mean(axis=1)
    S = (L * x).mean(axis=1)
    if np.all(np.isfinite(S0)) and np.all(S0 > 1e-300) and np.all(np.isfinite(S)):
        U = S / S0
        logS0 = np.log(S0)
    else:
        shift = lg.max(axis=1)
        Ls = np.exp(lg - shift[:, None])
        s0 = Ls.mean(axis=1)
        U = (Ls * x).mean(axis=1) / s0
        logS0 = shift + np.log(s0)
        S0 = np.exp(logS0)
        if not np.all((S0 > 0) & np.isfinite(S0)):
            m = int(np.argmin(np.where(np.isfinite(S0), S0, -np.inf)))
            raise DegeneracyError("likelihood normalizer leaves floating range even after "
                                  "log-sum-exp rescaling", (m, 0, -1))
        S = U * S0
    w = np.exp(logS0 - logS0.max())
    w /= w.sum()
    Ln = np.exp(lg - lg.max(axis=1, keepdims=True))
    ess = Ln.sum(axis=1) ** 2 / (Ln * Ln).sum(axis=1)
    return S0, S, U, logS0, w, ess


def inner_weights(setup, logL_k, logS0_k):
    """omega_p = L_p / (N S0_m), summing to one inside each scenario."""
    return np.exp(logL_k - setup.per_particle(logS0_k)) / setup.N


def _blowup(setup, arr, k, what):
    bad = np.flatnonzero(~np.isfinite(arr))
    if bad.size:
        p = int(bad[0])
        raise NumericalBlowupError(f"non-finite {what}", (p // setup.N, p % setup.N, k))


# ------------------------------------------------------------------ forward

def forward(setup, z, dB, dY, flow=None, with_cost=True, check=True):
    """Simulate on the reference measure.

    z: (n, M) control values; dB: (n, P); dY: (n, M).
    flow: MarginalLawFlow used as the input law, or None to use the law of
    the conditional mean produced by the run itself (the discrete fixed point).
    """
    c, grid = setup.model, setup.grid
    n, M, P, dt = grid.n, setup.M, setup.P, grid.dt
    t = grid.times
    X = np.empty((n + 1, P))
    logL = np.empty((n + 1, P))
    X[0] = c.x0
    logL[0] = 0.0
    U, S, S0, logS0, w, ess = (np.empty((n + 1, M)) for _ in range(6))
    run = np.zeros(P) if with_cost else None
    atoms_out = []

    def stats(k):
        S0[k], S[k], U[k], logS0[k], w[k], ess[k] = scenario_stats(setup, logL[k], X[k])
        if flow is None:
            return U[k], w[k]
        return flow[k].samples, flow[k].weights

    for k in range(n):
        y, wy = stats(k)
        atoms_out.append((y, wy))
        a = feature(setup.Ws, setup.ms, X, k)
        b = feature(setup.Wf, setup.mf, X, k) if with_cost else None
        zp = setup.per_particle(z[k])
        tk = t[k]

        def task(rng, a=a, b=b, zp=zp, tk=tk, y=y, wy=wy):
            r0, r1 = rng
            Z = zp[r0:r1]
            sb = setup.sops.mean(tk, a[r0:r1], Z, y, wy)
            fb = setup.fops.mean(tk, b[r0:r1], Z, y, wy) if b is not None else None
            return sb, fb

        parts = setup.workers.map(task, setup.chunks)
        sbar = np.concatenate([p[0] for p in parts])
        hx = np.broadcast_to(np.asarray(c.h(tk, X[k]), dtype=float), (P,))
        X[k + 1] = X[k] + sbar * dB[k]
        logL[k + 1] = logL[k] + hx * setup.per_particle(dY[k]) - 0.5 * hx * hx * dt
        if with_cost:
            run += np.concatenate([p[1] for p in parts])
        if check:
            _blowup(setup, X[k + 1], k + 1, "state")
            _blowup(setup, logL[k + 1], k + 1, "log-likelihood")
    y, wy = stats(n)
    atoms_out.append((y, wy))
    out = dict(X=X, logL=logL, U=U, S=S, S0=S0, logS0=logS0, w=w, ess=ess, atoms=atoms_out)
    if with_cost:
        def term(rng):
            r0, r1 = rng
            return avg(c.Phi(X[n, r0:r1, None], y[None, :]), wy, r1 - r0)

        out["terminal"] = np.concatenate(setup.workers.map(term, setup.chunks))
        out["running"] = run * dt
    return out


def cost_weights(setup, traj, cost_measure):
    if cost_measure == "q0":
        return None
    if cost_measure == "pu":
        return np.exp(traj["logL"][-1])
    raise InvalidInputError(f"unknown cost measure {cost_measure!r}")


def cost_value(setup, traj, cost_measure="q0"):
    """Return (J, standard error over scenarios, per-particle integrand)."""
    per = traj["terminal"] + traj["running"]
    cw = cost_weights(setup, traj, cost_measure)
    if cw is not None:
        per = per * cw
    by_scenario = per.reshape(setup.M, setup.N).mean(axis=1)
    J = float(per.mean())
    se = float(by_scenario.std(ddof=1) / np.sqrt(setup.M))
    return J, se, per


# ------------------------------------------------------------------ tangent

def _law_perturbation(setup, traj, k, K_k, dl_k):
    """First-order change of (U, w) at step k given (K, delta log L)."""
    om = inner_weights(setup, traj["logL"][k], traj["logS0"][k])
    Up = setup.per_particle(traj["U"][k])
    dU = setup.scenario_sum(om * (dl_k * (traj["X"][k] - Up) + K_k))
    ds = setup.scenario_sum(om * dl_k)
    w = traj["w"][k]
    dw = w * (ds - w @ ds)
    return dU, dw


def tangent(setup, traj, dz, cost_measure="q0"):
    """Forward linearization along control direction dz of shape (n, M).

    Returns K, dlogL (so that R = L * dlogL), the terminal-cost derivative
    and the running-cost derivative, both as means over particles.
    """
    c, grid = setup.model, setup.grid
    n, P, dt = grid.n, setup.P, grid.dt
    t = grid.times
    X, U, w = traj["X"], traj["U"], traj["w"]
    dB, dY = traj["dB"], traj["dY"]
    K = np.zeros((n + 1, P))
    dl = np.zeros((n + 1, P))
    drun = np.zeros(P)
    for k in range(n):
        dU, dw = _law_perturbation(setup, traj, k, K[k], dl[k])
        a = feature(setup.Ws, setup.ms, X, k)
        b = feature(setup.Wf, setup.mf, X, k)
        da = feature(setup.Ws, setup.ms, K, k)
        db = feature(setup.Wf, setup.mf, K, k)
        zp = setup.per_particle(traj["z"][k])
        dzp = setup.per_particle(dz[k])
        tk, y, wk = t[k], U[k], w[k]
        wdU = wk * dU

        def task(rng, a=a, b=b, da=da, db=db, zp=zp, dzp=dzp, tk=tk, y=y, wk=wk, dw=dw, wdU=wdU):
            r0, r1 = rng
            Z, dZ = zp[r0:r1], dzp[r0:r1]
            ds = setup.sops.tangent(tk, a[r0:r1], Z, y, wk, dw, wdU, da[r0:r1], dZ)
            df = setup.fops.tangent(tk, b[r0:r1], Z, y, wk, dw, wdU, db[r0:r1], dZ)
            return ds, df

        parts = setup.workers.map(task, setup.chunks)
        dsig = np.concatenate([p[0] for p in parts])
        drun += np.concatenate([p[1] for p in parts])
        hx = np.broadcast_to(np.asarray(c.h(tk, X[k]), dtype=float), (P,))
        hxx = np.broadcast_to(np.asarray(c.dh_dx(tk, X[k]), dtype=float), (P,))
        K[k + 1] = K[k] + dsig * dB[k]
        dl[k + 1] = dl[k] + hxx * K[k] * (setup.per_particle(dY[k]) - hx * dt)
        _blowup(setup, K[k + 1], k + 1, "tangent state")
    dU, dw = _law_perturbation(setup, traj, n, K[n], dl[n])
    wn, y = w[n], U[n][None, :]

    def term(rng):
        r0, r1 = rng
        C = r1 - r0
        x = X[n, r0:r1, None]
        return (avg(c.dPhi_dx(x, y), wn, C) * K[n, r0:r1] + avg(c.Phi(x, y), dw, C)
                + avg(c.dPhi_dy(x, y), wn * dU, C))

    dterm = np.concatenate(setup.workers.map(term, setup.chunks))
    drun *= dt
    cw = cost_weights(setup, traj, cost_measure)
    if cw is not None:
        base = traj["terminal"] + traj["running"]
        dterm = cw * (dterm + dl[n] * base)
        drun = cw * drun
    return dict(K=K, dlogL=dl, dterminal=float(dterm.mean()), drunning=float(drun.mean()))


# ------------------------------------------------------------------ adjoint

def _law_backprop(setup, traj, k, Ubar, wbar, lam_k, rho_k):
    """Pull adjoints of (U_k, w_k) back to X_k and log L_k in place."""
    om = inner_weights(setup, traj["logL"][k], traj["logS0"][k])
    w = traj["w"][k]
    Up = setup.per_particle(traj["U"][k])
    Ub = setup.per_particle(Ubar)
    lam_k += om * Ub
    rho_k += om * (Ub * (traj["X"][k] - Up) + setup.per_particle(w * (wbar - w @ wbar)))


def adjoint(setup, traj, cost_measure="q0"):
    """Reverse sweep for the discrete cost sum_p [Phi_bar + dt sum_k f_bar].

    lam[k] and rho[k] are the derivatives with respect to X_k and log L_k of
    that sum (not divided by P). zbar[k, m] is the derivative with respect to
    the control value of scenario m at step k. Csig and Cf hold the law
    averages of dsigma/dz and df/dz seen by each particle.
    """
    c, grid = setup.model, setup.grid
    n, M, P, dt = grid.n, setup.M, setup.P, grid.dt
    t = grid.times
    X, U, w = traj["X"], traj["U"], traj["w"]
    dB, dY = traj["dB"], traj["dY"]
    cw = cost_weights(setup, traj, cost_measure)
    cvec = np.ones(P) if cw is None else cw
    lam = np.empty((n + 1, P))
    rho = np.empty((n + 1, P))
    abar = np.zeros((n, P))
    bbar = np.zeros((n, P))
    zbar = np.zeros((n, M))
    Csig = np.empty((n, P))
    Cf = np.empty((n, P))

    wn, y = w[n], U[n][None, :]

    def term(rng):
        r0, r1 = rng
        C = r1 - r0
        x = X[n, r0:r1, None]
        cc = cvec[r0:r1]
        return (cc * avg(c.dPhi_dx(x, y), wn, C), tsum(cc, c.dPhi_dy(x, y), M),
                tsum(cc, c.Phi(x, y), M))

    parts = setup.workers.map(term, setup.chunks)
    lam[n] = np.concatenate([p[0] for p in parts])
    rho[n] = 0.0
    if cw is not None:
        rho[n] += cw * (traj["terminal"] + traj["running"])
    Ubar = wn * sum(p[1] for p in parts)
    wbar = sum(p[2] for p in parts)
    _law_backprop(setup, traj, n, Ubar, wbar, lam[n], rho[n])

    for k in range(n - 1, -1, -1):
        g = lam[k + 1] * dB[k]
        tk, y, wk = t[k], U[k], w[k]
        hx = np.broadcast_to(np.asarray(c.h(tk, X[k]), dtype=float), (P,))
        hxx = np.broadcast_to(np.asarray(c.dh_dx(tk, X[k]), dtype=float), (P,))
        lam[k] = lam[k + 1] + rho[k + 1] * hxx * (setup.per_particle(dY[k]) - hx * dt)
        rho[k] = rho[k + 1]
        a = feature(setup.Ws, setup.ms, X, k)
        b = feature(setup.Wf, setup.mf, X, k)
        zp = setup.per_particle(traj["z"][k])

        def task(rng, a=a, b=b, zp=zp, g=g, tk=tk, y=y, wk=wk):
            r0, r1 = rng
            Z = zp[r0:r1]
            Da, Cs, Sy, Ss = setup.sops.adjoint(tk, a[r0:r1], Z, y, wk, g[r0:r1])
            Fa, Cf, Fy, Fs = setup.fops.adjoint(tk, b[r0:r1], Z, y, wk, dt * cvec[r0:r1])
            return Da, Cs, Fa, Cf, Sy + Fy, Ss + Fs

        parts = setup.workers.map(task, setup.chunks)
        Da = np.concatenate([p[0] for p in parts])
        Csig[k] = np.concatenate([p[1] for p in parts])
        Fa = np.concatenate([p[2] for p in parts])
        Cf[k] = np.concatenate([p[3] for p in parts])
        Ubar = wk * sum(p[4] for p in parts)
        wbar = sum(p[5] for p in parts)
        abar[k] = g * Da
        bbar[k] = dt * cvec * Fa
        zbar[k] = setup.scenario_sum(g * Csig[k] + dt * cvec * Cf[k])
        if setup.ms:
            lam[k] += setup.Ws[k:n, k] @ abar[k:n]
        else:
            lam[k] += setup.Ws[k, k] * abar[k]
        if setup.mf:
            lam[k] += setup.Wf[k:n, k] @ bbar[k:n]
        else:
            lam[k] += setup.Wf[k, k] * bbar[k]
        _law_backprop(setup, traj, k, Ubar, wbar, lam[k], rho[k])
        _blowup(setup, lam[k], k, "adjoint")
    return dict(lam=lam, rho=rho, zbar=zbar, Csig=Csig, Cf=Cf, cost_weights=cvec)
