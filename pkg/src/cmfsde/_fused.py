"""Compiled law averages for diffusions of the form

    sigma(t, a, y, z) = scale * tanh(u + v),  u = offset + ca*a + cz*z,  v = cy*y.

tanh(u + v) is assembled from tanh(u) and tanh(v) with the addition formula,
so each (particle, atom) pair costs one division instead of one tanh. Pairs
whose denominator nearly cancels fall back to a direct tanh.
"""

from __future__ import annotations

import math

import numba
import numpy as np

_EPS_DEN = 1e-6


@numba.njit(cache=True, nogil=True, inline="always")
def _pair(u, v, tu, tv):
    den = 1.0 + tu * tv
    if den < _EPS_DEN:
        return math.tanh(u + v)
    return (tu + tv) / den


@numba.njit(cache=True, nogil=True)
def _mean(u, v, w):
    C, A = u.size, v.size
    tu = np.tanh(u)
    tv = np.tanh(v)
    out = np.empty(C)
    for p in range(C):
        acc = 0.0
        for j in range(A):
            acc += w[j] * _pair(u[p], v[j], tu[p], tv[j])
        out[p] = acc
    return out


@numba.njit(cache=True, nogil=True)
def _tangent(u, v, w, dw, wdU):
    C, A = u.size, v.size
    tu = np.tanh(u)
    tv = np.tanh(v)
    a1 = np.empty(C)
    a2 = np.empty(C)
    a3 = np.empty(C)
    for p in range(C):
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        for j in range(A):
            s = _pair(u[p], v[j], tu[p], tv[j])
            d = 1.0 - s * s
            s1 += dw[j] * s
            s2 += wdU[j] * d
            s3 += w[j] * d
        a1[p] = s1
        a2[p] = s2
        a3[p] = s3
    return a1, a2, a3


@numba.njit(cache=True, nogil=True)
def _adjoint(u, v, w, g):
    C, A = u.size, v.size
    tu = np.tanh(u)
    tv = np.tanh(v)
    a3 = np.empty(C)
    t1 = np.zeros(A)
    t2 = np.zeros(A)
    for p in range(C):
        s3 = 0.0
        gp = g[p]
        for j in range(A):
            s = _pair(u[p], v[j], tu[p], tv[j])
            d = 1.0 - s * s
            s3 += w[j] * d
            t1[j] += gp * d
            t2[j] += gp * s
        a3[p] = s3
    return a3, t1, t2


class TanhOps:
    """Law-averaged sigma, its linearization and its transpose for the tanh family."""

    def __init__(self, scale, offset, ca, cy, cz):
        self.scale, self.offset = float(scale), float(offset)
        self.ca, self.cy, self.cz = float(ca), float(cy), float(cz)

    def _uv(self, a, z, y):
        u = self.offset + self.ca * a + self.cz * z
        return np.ascontiguousarray(u, dtype=float), np.ascontiguousarray(self.cy * y, dtype=float)

    def mean(self, t, a, z, y, w):
        u, v = self._uv(a, z, y)
        return self.scale * _mean(u, v, np.ascontiguousarray(w))

    def tangent(self, t, a, z, y, w, dw, wdU, da, dz):
        u, v = self._uv(a, z, y)
        a1, a2, a3 = _tangent(u, v, np.ascontiguousarray(w), np.ascontiguousarray(dw),
                              np.ascontiguousarray(wdU))
        return self.scale * (a1 + self.cy * a2 + a3 * (self.ca * da + self.cz * dz))

    def adjoint(self, t, a, z, y, w, g):
        u, v = self._uv(a, z, y)
        a3, t1, t2 = _adjoint(u, v, np.ascontiguousarray(w), np.ascontiguousarray(g))
        s = self.scale
        return s * self.ca * a3, s * self.cz * a3, s * self.cy * t1, s * t2
