"""Time grids, reproducible Gaussian streams, empirical laws on the real line
and Wasserstein distances between them."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.optimize import linear_sum_assignment, linprog

from .errors import CapacityError, InvalidInputError

PATHSPACE_CAP = 512

CHANNEL_B1 = 1
CHANNEL_Y = 2


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = k*T/n, k = 0..n."""

    T: float
    n: int

    def __post_init__(self):
        if not (np.isfinite(self.T) and self.T > 0):
            raise InvalidInputError(f"horizon must be positive, got {self.T}")
        if int(self.n) != self.n or self.n < 2:
            raise InvalidInputError(f"need at least 2 steps, got {self.n}")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "n", int(self.n))

    @property
    def dt(self) -> float:
        return self.T / self.n

    @cached_property
    def times(self) -> np.ndarray:
        t = np.arange(self.n + 1) * self.dt
        t[-1] = self.T
        t.flags.writeable = False
        return t


@dataclass(frozen=True)
class RngStream:
    """Counter-addressed Gaussian source for the reference Brownian pair (B1, Y).

    Every scenario and channel owns a disjoint Philox counter block, so the
    increment at (seed, m, i, k, channel) does not depend on how many
    scenarios or particles are simulated, on query order, or on how work is
    split across threads. Particle i of scenario m reads row i of that
    scenario's block.

    ``substeps`` draws the path on a grid ``substeps`` times finer and sums
    the fine increments, so runs at n steps with substeps=2 and at 2n steps
    with substeps=1 see the same Brownian path.
    """

    seed: int
    substeps: int = 1

    def __post_init__(self):
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidInputError("seed must fit in an unsigned 64-bit integer")
        if self.substeps < 1:
            raise InvalidInputError("substeps must be >= 1")

    def _generator(self, channel: int, m: int) -> np.random.Generator:
        bitgen = np.random.Philox(key=np.array([int(self.seed), channel], dtype=np.uint64),
                                  counter=np.array([0, 0, 0, int(m)], dtype=np.uint64))
        return np.random.Generator(bitgen)

    def _draw(self, grid: TimeGrid, channel: int, m: int, rows: int) -> np.ndarray:
        s = self.substeps
        z = self._generator(channel, m).standard_normal((rows, grid.n * s))
        z *= np.sqrt(grid.dt / s)
        if s > 1:
            z = z.reshape(rows, grid.n, s).sum(axis=2)
        return z

    def scenario_increments(self, grid: TimeGrid, m: int, n_particles: int):
        """Return (dB1 of shape (n_particles, n), dY of shape (n,)) for scenario m."""
        dB = self._draw(grid, CHANNEL_B1, m, n_particles)
        dY = self._draw(grid, CHANNEL_Y, m, 1)[0]
        return dB, dY

    def brownian_increments(self, grid: TimeGrid, m: int, i: int):
        """Increments of (B1, Y) seen by particle i of scenario m."""
        if m < 0 or i < 0:
            raise InvalidInputError("indices must be nonnegative")
        dB = self._draw(grid, CHANNEL_B1, m, i + 1)[i]
        dY = self._draw(grid, CHANNEL_Y, m, 1)[0]
        return dB, dY


class EmpiricalLaw:
    """Finitely supported probability law on the real line, atoms kept sorted."""

    __slots__ = ("samples", "weights", "_cdf")

    def __init__(self, samples, weights=None):
        x = np.asarray(samples, dtype=float).ravel()
        if x.size == 0:
            raise InvalidInputError("empirical law needs at least one sample")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("empirical law samples must be finite")
        order = np.argsort(x, kind="stable")
        if weights is None:
            w = np.full(x.size, 1.0 / x.size)
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.shape != x.shape:
                raise InvalidInputError("weights and samples differ in length")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise InvalidInputError("weights must be finite and nonnegative")
            total = w.sum()
            if total <= 0:
                raise InvalidInputError("weights must have positive mass")
            w = w[order] / total
        self.samples = x[order]
        self.weights = w
        self.samples.flags.writeable = False
        self.weights.flags.writeable = False
        cdf = np.cumsum(self.weights)
        cdf[-1] = 1.0
        self._cdf = cdf

    @classmethod
    def dirac(cls, x: float) -> "EmpiricalLaw":
        return cls([x])

    def __len__(self):
        return self.samples.size

    def __repr__(self):
        return f"EmpiricalLaw(size={len(self)}, mean={self.mean():.6g})"

    @property
    def cdf(self) -> np.ndarray:
        return self._cdf

    @property
    def uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> float:
        return float(self.weights @ self.samples)

    def quantile(self, q):
        """Left-continuous inverse of the distribution function."""
        q = np.asarray(q, dtype=float)
        idx = np.searchsorted(self._cdf, q, side="left")
        return self.samples[np.clip(idx, 0, len(self) - 1)]


def fourth_moment(law: EmpiricalLaw) -> float:
    return float(law.weights @ law.samples**4)


def _quantile_pieces(a: EmpiricalLaw, b: EmpiricalLaw):
    """Break [0, 1] at both distribution functions; return piece lengths and
    the two quantile values on each piece."""
    cuts = np.union1d(a.cdf, b.cdf)
    lo = np.concatenate(([0.0], cuts[:-1]))
    mid = 0.5 * (lo + cuts)
    return cuts - lo, a.quantile(mid), b.quantile(mid)


def wasserstein_1d(a: EmpiricalLaw, b: EmpiricalLaw, p: int = 2) -> float:
    """Exact W_p through the monotone coupling."""
    if p not in (1, 2):
        raise InvalidInputError("order must be 1 or 2")
    if len(a) == len(b) and a.uniform and b.uniform:
        gap = np.abs(a.samples - b.samples)
        return float(np.mean(gap)) if p == 1 else float(np.sqrt(np.mean(gap * gap)))
    mass, qa, qb = _quantile_pieces(a, b)
    gap = np.abs(qa - qb)
    return float(mass @ gap) if p == 1 else float(np.sqrt(mass @ (gap * gap)))


def quantile_mix(a: EmpiricalLaw, b: EmpiricalLaw, lam: float) -> EmpiricalLaw:
    """W2 geodesic point (1 - lam)*a + lam*b, built in quantile space."""
    if lam == 1.0:
        return b
    if lam == 0.0:
        return a
    if len(a) == len(b) and a.uniform and b.uniform:
        return EmpiricalLaw((1.0 - lam) * a.samples + lam * b.samples)
    mass, qa, qb = _quantile_pieces(a, b)
    keep = mass > 0
    return EmpiricalLaw((1.0 - lam) * qa[keep] + lam * qb[keep], mass[keep])


@dataclass(frozen=True)
class MarginalLawFlow:
    """One empirical law per grid time."""

    grid: TimeGrid
    laws: tuple = field(repr=False)

    def __post_init__(self):
        laws = tuple(self.laws)
        if len(laws) != self.grid.n + 1:
            raise InvalidInputError(f"flow needs {self.grid.n + 1} laws, got {len(laws)}")
        object.__setattr__(self, "laws", laws)

    @classmethod
    def dirac(cls, grid: TimeGrid, x0: float) -> "MarginalLawFlow":
        law = EmpiricalLaw.dirac(x0)
        return cls(grid, (law,) * (grid.n + 1))

    @classmethod
    def from_samples(cls, grid: TimeGrid, samples, weights=None) -> "MarginalLawFlow":
        """Build from arrays of shape (n+1, M); one row per grid time."""
        samples = np.asarray(samples, dtype=float)
        if weights is None:
            return cls(grid, tuple(EmpiricalLaw(row) for row in samples))
        weights = np.asarray(weights, dtype=float)
        return cls(grid, tuple(EmpiricalLaw(s, w) for s, w in zip(samples, weights)))

    @classmethod
    def from_paths(cls, grid: TimeGrid, paths) -> "MarginalLawFlow":
        """Marginals of a uniform path sample set of shape (M, n+1)."""
        return cls.from_samples(grid, np.asarray(paths, dtype=float).T)

    def __getitem__(self, k) -> EmpiricalLaw:
        return self.laws[k]

    def __len__(self):
        return len(self.laws)

    def fourth_moments(self) -> np.ndarray:
        return np.array([fourth_moment(law) for law in self.laws])

    def means(self) -> np.ndarray:
        return np.array([law.mean() for law in self.laws])

    def mix(self, other: "MarginalLawFlow", lam: float) -> "MarginalLawFlow":
        """Quantile interpolation (1 - lam)*self + lam*other at every time."""
        _check_grids(self, other)
        return MarginalLawFlow(self.grid, tuple(quantile_mix(a, b, lam)
                                                for a, b in zip(self.laws, other.laws)))


def _check_grids(a: MarginalLawFlow, b: MarginalLawFlow):
    if a.grid != b.grid:
        raise InvalidInputError(f"grid mismatch: {a.grid} vs {b.grid}")


def wasserstein_flow(a: MarginalLawFlow, b: MarginalLawFlow, p: int = 2) -> float:
    """Largest marginal W_p over the grid."""
    _check_grids(a, b)
    return max(wasserstein_1d(x, y, p) for x, y in zip(a.laws, b.laws))


def wasserstein_pathspace(a, b, p: int = 2, wa=None, wb=None) -> float:
    """Exact W_p between two path sample sets under the sup-norm ground cost.

    Inputs have shape (M_a, n+1) and (M_b, n+1). Uniform sets of equal size
    are matched by assignment; weighted sets go through the transport
    linear program.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.size == 0 or b.size == 0:
        raise InvalidInputError("path sets must be nonempty")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"path sets live on different grids: {a.shape} vs {b.shape}")
    if max(a.shape[0], b.shape[0]) > PATHSPACE_CAP:
        raise CapacityError(f"{max(a.shape[0], b.shape[0])} paths exceeds the exact transport "
                            f"cap of {PATHSPACE_CAP}; use wasserstein_flow instead")
    cost = np.empty((a.shape[0], b.shape[0]))
    for r, path in enumerate(a):
        cost[r] = np.abs(path - b).max(axis=1) ** p
    if wa is None and wb is None and a.shape[0] == b.shape[0]:
        rows, cols = linear_sum_assignment(cost)
        return float(cost[rows, cols].mean() ** (1.0 / p))
    wa = _unit(wa, a.shape[0])
    wb = _unit(wb, b.shape[0])
    return float(max(_transport(cost, wa, wb), 0.0) ** (1.0 / p))


def _unit(w, m):
    if w is None:
        return np.full(m, 1.0 / m)
    w = np.asarray(w, dtype=float).ravel()
    if w.shape != (m,) or np.any(w < 0) or w.sum() <= 0:
        raise InvalidInputError("path weights must be nonnegative with positive mass")
    return w / w.sum()


def _transport(cost, wa, wb):
    ma, mb = cost.shape
    rows = sparse.kron(sparse.eye(ma), np.ones((1, mb)))
    cols = sparse.kron(np.ones((1, ma)), sparse.eye(mb))
    res = linprog(cost.ravel(), A_eq=sparse.vstack([rows, cols]).tocsr(),
                  b_eq=np.concatenate([wa, wb]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise InvalidInputError(f"transport problem failed: {res.message}")
    return res.fun
