"""Closed-form references used to validate the particle machinery."""

from __future__ import annotations

import numpy as np


def kalman_bucy(Y: np.ndarray, dt: float, x0: float, sigma, c: float = 1.0, P0: float = 0.0):
    """Kalman-Bucy filter for dX = sigma_t dB, dY = c X dt + dW on a grid.

    Integrates dP/dt = sigma^2 - c^2 P^2 and dm = P c (dY - c m dt) with
    left-point steps. ``sigma`` may be a scalar or an (M, n) array of
    per-scenario values; Y has shape (M, n+1). Returns (m, P) with m of shape
    (M, n+1) and P broadcast to the same shape.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    M, n1 = Y.shape
    n = n1 - 1
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (M, n)) if np.ndim(sigma) else \
        np.full((M, n), float(sigma))
    dY = np.diff(Y, axis=1)
    m = np.empty((M, n1))
    P = np.empty((M, n1))
    m[:, 0] = x0
    P[:, 0] = P0
    for k in range(n):
        m[:, k + 1] = m[:, k] + P[:, k] * c * (dY[:, k] - c * m[:, k] * dt)
        P[:, k + 1] = P[:, k] + (sig[:, k] ** 2 - c * c * P[:, k] ** 2) * dt
    return m, P
