"""Observation-feedback control policies.

A policy maps each scenario's observation path to control values on the
left grid points t_0..t_{n-1}; the value at t_k only reads Y at times <= t_k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .numerics import TimeGrid

FEATURES = ("const", "y", "int_y", "ewma")


def observation_features(grid: TimeGrid, Y: np.ndarray, names=FEATURES,
                         ewma_rate: float = 1.0) -> np.ndarray:
    """Feature tensor of shape (M, n, d) at the left grid points.

    int_y is the left Riemann sum of Y up to t_k; ewma is the recursive
    exponential average e_k = g*e_{k-1} + (1 - g)*Y_k with g = exp(-rate*dt).
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n = grid.n
    cols = []
    for name in names:
        if name == "const":
            cols.append(np.ones((Y.shape[0], n)))
        elif name == "y":
            cols.append(Y[:, :n])
        elif name == "int_y":
            run = np.zeros_like(Y[:, :n])
            run[:, 1:] = np.cumsum(Y[:, :n - 1], axis=1) * grid.dt
            cols.append(run)
        elif name == "ewma":
            g = np.exp(-ewma_rate * grid.dt)
            e = np.zeros_like(Y[:, :n])
            for k in range(1, n):
                e[:, k] = g * e[:, k - 1] + (1.0 - g) * Y[:, k]
            cols.append(e)
        else:
            raise InvalidInputError(f"unknown feature {name!r}; choose from {FEATURES}")
    return np.stack(cols, axis=-1)


class ControlPolicy:
    """Base class; subclasses implement ``values``."""

    u_min: float
    u_max: float

    def values(self, grid: TimeGrid, Y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def in_set(self, grid: TimeGrid, Y: np.ndarray) -> bool:
        z = self.values(grid, Y)
        return bool(np.all((z >= self.u_min) & (z <= self.u_max)))


@dataclass(frozen=True)
class LinearPolicy(ControlPolicy):
    """u_t = clip(theta . psi(t, Y), u_min, u_max)."""

    theta: tuple
    features: tuple = FEATURES
    u_min: float = -1.0
    u_max: float = 1.0
    ewma_rate: float = 1.0

    def __post_init__(self):
        theta = tuple(float(v) for v in np.atleast_1d(self.theta))
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "features", tuple(self.features))
        if len(theta) != len(self.features):
            raise InvalidInputError(f"{len(theta)} parameters for {len(self.features)} features")
        if not self.u_min <= self.u_max:
            raise InvalidInputError("empty control interval")

    @classmethod
    def constant(cls, value: float, u_min: float = -1.0, u_max: float = 1.0) -> "LinearPolicy":
        return cls((value,), ("const",), u_min, u_max)

    def with_theta(self, theta) -> "LinearPolicy":
        return LinearPolicy(tuple(theta), self.features, self.u_min, self.u_max, self.ewma_rate)

    def feature_map(self):
        return (self.features, self.ewma_rate)

    def features_on(self, grid: TimeGrid, Y: np.ndarray) -> np.ndarray:
        return observation_features(grid, Y, self.features, self.ewma_rate)

    def raw_values(self, grid: TimeGrid, Y: np.ndarray) -> np.ndarray:
        return self.features_on(grid, Y) @ np.asarray(self.theta)

    def values(self, grid, Y):
        return np.clip(self.raw_values(grid, Y), self.u_min, self.u_max)

    def active(self, grid, Y) -> np.ndarray:
        """True where the clip is not binding; the gradient lives there."""
        raw = self.raw_values(grid, Y)
        return (raw > self.u_min) & (raw < self.u_max)


@dataclass(frozen=True)
class MixedPolicy(ControlPolicy):
    """Pointwise convex combination u + theta*(v - u)."""

    base: ControlPolicy
    target: ControlPolicy
    theta: float

    @property
    def u_min(self):
        return max(self.base.u_min, self.target.u_min)

    @property
    def u_max(self):
        return min(self.base.u_max, self.target.u_max)

    def values(self, grid, Y):
        u = self.base.values(grid, Y)
        return u + self.theta * (self.target.values(grid, Y) - u)


@dataclass(frozen=True, eq=False)
class TablePolicy(ControlPolicy):
    """Precomputed (M, n) control values; used for shifted directions."""

    table: np.ndarray
    u_min: float = -np.inf
    u_max: float = np.inf

    def values(self, grid, Y):
        z = np.asarray(self.table, dtype=float)
        if z.shape != (np.atleast_2d(Y).shape[0], grid.n):
            raise InvalidInputError(f"table shape {z.shape} does not match ensemble")
        return z


def perturb(u: ControlPolicy, v: ControlPolicy, theta: float, mode: str = "value") -> ControlPolicy:
    """Convex variation u + theta*(v - u).

    ``mode="value"`` mixes control values and works for any pair.
    ``mode="parameter"`` interpolates parameters of two linear policies with
    the same feature map; it agrees with value mixing only where neither clip
    binds, and is rejected for incompatible feature maps.
    """
    if not 0.0 <= theta <= 1.0:
        raise InvalidInputError("theta must lie in [0, 1]")
    if mode == "parameter":
        if not (isinstance(u, LinearPolicy) and isinstance(v, LinearPolicy)
                and u.feature_map() == v.feature_map()
                and (u.u_min, u.u_max) == (v.u_min, v.u_max)):
            raise InvalidInputError("parameter interpolation needs linear policies sharing "
                                    "a feature map and control interval")
        th = np.asarray(u.theta) + theta * (np.asarray(v.theta) - np.asarray(u.theta))
        return u.with_theta(th)
    if mode != "value":
        raise InvalidInputError(f"unknown perturbation mode {mode!r}")
    if theta == 0.0:
        return u
    if theta == 1.0:
        return v
    return MixedPolicy(u, v, float(theta))
