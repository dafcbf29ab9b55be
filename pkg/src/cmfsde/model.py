"""Coefficient sets (sigma, h, f, Phi) with their derivatives, affine path
features, built-in models and sampled assumption checks.

Coefficient callables are numpy-vectorized and must broadcast. The engine
evaluates them on an (particles, atoms) layout: ``a`` and ``z`` arrive with
shape (C, 1) and ``y`` with shape (1, A). A callable that ignores an argument
may return a smaller broadcastable array, which lets the engine skip work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._fused import TanhOps
from .errors import DerivativeMismatchError, InvalidInputError
from .numerics import TimeGrid

ZERO = 0.0


def _zero(*args):
    return ZERO


@dataclass(frozen=True)
class PathFeatureKernel:
    """a_t(phi) = alpha0(t)*phi(t) + int_0^t kappa(t, r) phi(r) dr.

    On a grid the integral is a left Riemann sum over strictly earlier nodes,
    so ``weights(grid)`` is lower triangular with alpha0 on the diagonal.
    """

    alpha0: Callable
    kappa: Callable | None = None
    mass_bound: float = 1.0

    @classmethod
    def identity(cls) -> "PathFeatureKernel":
        return cls(alpha0=lambda t: np.ones_like(np.asarray(t, dtype=float)), mass_bound=1.0)

    @classmethod
    def exponential(cls, c_kappa: float = 1.0, rate: float = 1.0) -> "PathFeatureKernel":
        """Half the mass on the current value, half on an exponential memory."""
        half = 0.5 * c_kappa
        return cls(alpha0=lambda t: np.full_like(np.asarray(t, dtype=float), half),
                   kappa=lambda t, r: half * rate * np.exp(-rate * (t - r)),
                   mass_bound=c_kappa)

    @property
    def has_memory(self) -> bool:
        return self.kappa is not None

    def weights(self, grid: TimeGrid) -> np.ndarray:
        t = grid.times
        W = np.diag(np.broadcast_to(self.alpha0(t), t.shape).astype(float))
        if self.kappa is not None:
            tk, tr = np.meshgrid(t, t, indexing="ij")
            below = np.tril(np.ones_like(W, dtype=bool), k=-1)
            W[below] = (np.broadcast_to(self.kappa(tk, tr), W.shape) * grid.dt)[below]
        mass = np.abs(W).sum(axis=1)
        if np.any(mass > self.mass_bound * (1 + 1e-12) + 1e-15):
            raise InvalidInputError(f"kernel mass {mass.max():.6g} exceeds bound {self.mass_bound}")
        return W

    def mass(self, grid: TimeGrid) -> np.ndarray:
        return np.abs(self.weights(grid)).sum(axis=1)


@dataclass(frozen=True)
class CoefficientSet:
    sigma: Callable
    dsigma_da: Callable
    dsigma_dy: Callable
    dsigma_dz: Callable
    h: Callable
    dh_dx: Callable
    f: Callable
    df_da: Callable
    df_dy: Callable
    df_dz: Callable
    Phi: Callable
    dPhi_dx: Callable
    dPhi_dy: Callable
    kernel_sigma: PathFeatureKernel = field(default_factory=PathFeatureKernel.identity)
    kernel_f: PathFeatureKernel = field(default_factory=PathFeatureKernel.identity)
    control_set: tuple = (-1.0, 1.0)
    x0: float = 0.0
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)
    # Optional fused evaluators returning (value, d/da, d/dy, d/dz); they let a
    # model share one transcendental evaluation between a value and its partials.
    sigma_jet: Callable | None = field(default=None, compare=False)
    f_jet: Callable | None = field(default=None, compare=False)
    # Optional compiled law averages for sigma (see the engine's GenericOps).
    sigma_ops: object | None = field(default=None, compare=False)

    def __post_init__(self):
        lo, hi = self.control_set
        if not lo <= hi:
            raise InvalidInputError(f"empty control set {self.control_set}")

    @property
    def u_min(self) -> float:
        return float(self.control_set[0])

    @property
    def u_max(self) -> float:
        return float(self.control_set[1])

    def sigma_all(self, t, a, y, z):
        if self.sigma_jet is not None:
            return self.sigma_jet(t, a, y, z)
        return (self.sigma(t, a, y, z), self.dsigma_da(t, a, y, z),
                self.dsigma_dy(t, a, y, z), self.dsigma_dz(t, a, y, z))

    def f_all(self, t, a, y, z):
        if self.f_jet is not None:
            return self.f_jet(t, a, y, z)
        return (self.f(t, a, y, z), self.df_da(t, a, y, z),
                self.df_dy(t, a, y, z), self.df_dz(t, a, y, z))


def constant_model(sigma=1.0, h=0.0, f=0.0, Phi=0.0, x0=0.0, control_set=(-1.0, 1.0)):
    """Coefficients that are all constants; handy for degenerate identities."""
    const = lambda v: (lambda *args: float(v))
    return CoefficientSet(sigma=const(sigma), dsigma_da=_zero, dsigma_dy=_zero, dsigma_dz=_zero,
                          h=const(h), dh_dx=_zero, f=const(f), df_da=_zero, df_dy=_zero,
                          df_dz=_zero, Phi=const(Phi), dPhi_dx=_zero, dPhi_dy=_zero,
                          control_set=control_set, x0=x0, name="constant",
                          params=dict(sigma=sigma, h=h, f=f, Phi=Phi))


# ---------------------------------------------------------------- built-ins

BUILTIN_DEFAULTS = {
    "bounded_sigmoid": dict(sigma0=0.5, h0=1.0, coef_a=0.3, coef_y=0.3, coef_z=0.3, offset=1.0,
                            cost_x=1.0, rho=0.1, z_target=0.0, f_const=0.0, phi_scale=1.0,
                            phi_const=0.0, c_kappa=1.0, kappa_rate=1.0, x0=0.5,
                            u_min=-1.0, u_max=1.0),
    "linear_gaussian": dict(sigma0=1.0, sigma_z=0.0, c=1.0, rho=0.0, z_target=0.0, f_const=0.0,
                            phi_scale=1.0, phi_const=0.0, x0=1.0, u_min=-1.0, u_max=1.0),
}
BUILTIN_DEFAULTS["no_meanfield"] = dict(BUILTIN_DEFAULTS["bounded_sigmoid"])
BUILTIN_DEFAULTS["zero_observation"] = dict(BUILTIN_DEFAULTS["bounded_sigmoid"])

BUILTIN_NAMES = tuple(BUILTIN_DEFAULTS)


def _sigmoid_model(name, p):
    s0, ca, cy, cz, off = p["sigma0"], p["coef_a"], p["coef_y"], p["coef_z"], p["offset"]
    h0, wx, rho, zs = p["h0"], p["cost_x"], p["rho"], p["z_target"]
    fc, ps, pc = p["f_const"], p["phi_scale"], p["phi_const"]

    def arg(a, y, z):
        return off + ca * a + cy * y + cz * z

    def sigma(t, a, y, z):
        return s0 * np.tanh(arg(a, y, z))

    def dsig(coef):
        def d(t, a, y, z):
            s = np.tanh(arg(a, y, z))
            return coef * s0 * (1.0 - s * s)
        return d

    def sigma_jet(t, a, y, z):
        s = np.tanh(arg(a, y, z))
        d = s0 * (1.0 - s * s)
        return s0 * s, ca * d, cy * d, cz * d

    def f(t, a, y, z):
        return wx * np.tanh(a) ** 2 + rho * (z - zs) ** 2 + fc

    def df_da(t, a, y, z):
        s = np.tanh(a)
        return 2.0 * wx * s * (1.0 - s * s)

    def df_dz(t, a, y, z):
        return 2.0 * rho * (z - zs)

    def f_jet(t, a, y, z):
        s = np.tanh(a)
        return (wx * s * s + rho * (z - zs) ** 2 + fc, 2.0 * wx * s * (1.0 - s * s), ZERO,
                2.0 * rho * (z - zs))

    def h(t, x):
        return h0 * np.tanh(x)

    def dh_dx(t, x):
        s = np.tanh(x)
        return h0 * (1.0 - s * s)

    def Phi(x, y):
        return ps * np.tanh(x) * np.tanh(y) + pc

    def dPhi_dx(x, y):
        sx = np.tanh(x)
        return ps * (1.0 - sx * sx) * np.tanh(y)

    def dPhi_dy(x, y):
        sy = np.tanh(y)
        return ps * np.tanh(x) * (1.0 - sy * sy)

    return CoefficientSet(
        sigma=sigma, dsigma_da=dsig(ca), dsigma_dy=dsig(cy), dsigma_dz=dsig(cz),
        h=h, dh_dx=dh_dx, f=f, df_da=df_da, df_dy=_zero, df_dz=df_dz,
        Phi=Phi, dPhi_dx=dPhi_dx, dPhi_dy=dPhi_dy,
        kernel_sigma=PathFeatureKernel.exponential(p["c_kappa"], p["kappa_rate"]),
        kernel_f=PathFeatureKernel.identity(),
        control_set=(p["u_min"], p["u_max"]), x0=p["x0"], name=name, params=dict(p),
        sigma_jet=sigma_jet, f_jet=f_jet, sigma_ops=TanhOps(s0, off, ca, cy, cz))


def _linear_gaussian(p):
    s0, sz, c = p["sigma0"], p["sigma_z"], p["c"]
    rho, zs, fc, ps, pc = p["rho"], p["z_target"], p["f_const"], p["phi_scale"], p["phi_const"]

    def sigma(t, a, y, z):
        return s0 + sz * np.asarray(z)

    def dsigma_dz(t, a, y, z):
        return sz

    def f(t, a, y, z):
        return rho * (np.asarray(z) - zs) ** 2 + fc

    def df_dz(t, a, y, z):
        return 2.0 * rho * (np.asarray(z) - zs)

    def h(t, x):
        return c * np.asarray(x)

    def dh_dx(t, x):
        return c * np.ones_like(np.asarray(x, dtype=float))

    def Phi(x, y):
        return ps * (x - y) ** 2 + pc

    def dPhi_dx(x, y):
        return 2.0 * ps * (x - y)

    def dPhi_dy(x, y):
        return -2.0 * ps * (x - y)

    return CoefficientSet(
        sigma=sigma, dsigma_da=_zero, dsigma_dy=_zero, dsigma_dz=dsigma_dz,
        h=h, dh_dx=dh_dx, f=f, df_da=_zero, df_dy=_zero, df_dz=df_dz,
        Phi=Phi, dPhi_dx=dPhi_dx, dPhi_dy=dPhi_dy,
        control_set=(p["u_min"], p["u_max"]), x0=p["x0"], name="linear_gaussian",
        params=dict(p))


def builtin_model(name: str, **params) -> CoefficientSet:
    """Built-in coefficient sets.

    bounded_sigmoid   sigma = sigma0*tanh(offset + coef_a*a + coef_y*y + coef_z*z),
                      h = h0*tanh(x), f = cost_x*tanh(a_f)^2 + rho*(z - z_target)^2 + f_const,
                      Phi = phi_scale*tanh(x)*tanh(y) + phi_const, exponential-memory feature.
    linear_gaussian   sigma = sigma0 + sigma_z*z, h = c*x, f = rho*(z - z_target)^2 + f_const,
                      Phi = phi_scale*(x - y)^2 + phi_const.
    no_meanfield      bounded_sigmoid with coef_y forced to 0.
    zero_observation  bounded_sigmoid with h0 forced to 0.
    """
    if name not in BUILTIN_DEFAULTS:
        raise InvalidInputError(f"unknown model {name!r}; choose from {', '.join(BUILTIN_NAMES)}")
    p = dict(BUILTIN_DEFAULTS[name])
    unknown = set(params) - set(p)
    if unknown:
        raise InvalidInputError(f"unknown parameters for {name}: {sorted(unknown)}")
    p.update({k: float(v) for k, v in params.items()})
    if name == "linear_gaussian":
        return _linear_gaussian(p)
    if name == "no_meanfield":
        p["coef_y"] = 0.0
    elif name == "zero_observation":
        p["h0"] = 0.0
    return _sigmoid_model(name, p)


# ------------------------------------------------------------ sampled checks

@dataclass(frozen=True)
class AssumptionReport:
    """Empirical suprema on a small and a large probe box."""

    small_box: float
    large_box: float
    sup_small: dict
    sup_large: dict
    kernel_mass: float
    flagged: tuple

    def bounded(self, key) -> bool:
        return key not in self.flagged


def _probe(rng, probes, box, control_set, T):
    t = rng.uniform(0.0, T, probes)
    a, x, y = (rng.uniform(-box, box, probes) for _ in range(3))
    z = rng.uniform(control_set[0], control_set[1], probes)
    return t, a, x, y, z


def _sup(v, shape):
    return float(np.max(np.abs(np.broadcast_to(np.asarray(v, dtype=float), shape))))


def _quantities(c: CoefficientSet, t, a, x, y, z):
    shape = t.shape
    out = {
        "sigma": c.sigma(t, a, y, z), "h": c.h(t, x), "f": c.f(t, a, y, z), "Phi": c.Phi(x, y),
        "y*dsigma_dy": y * np.asarray(c.dsigma_dy(t, a, y, z)),
        "x*dh_dx": x * np.asarray(c.dh_dx(t, x)),
        "x*h": x * np.asarray(c.h(t, x)),
        "x^2*dh_dx": x * x * np.asarray(c.dh_dx(t, x)),
        "dsigma_da": c.dsigma_da(t, a, y, z), "dsigma_dy": c.dsigma_dy(t, a, y, z),
        "dsigma_dz": c.dsigma_dz(t, a, y, z), "dh_dx": c.dh_dx(t, x),
        "df_da": c.df_da(t, a, y, z), "df_dy": c.df_dy(t, a, y, z), "df_dz": c.df_dz(t, a, y, z),
        "dPhi_dx": c.dPhi_dx(x, y), "dPhi_dy": c.dPhi_dy(x, y),
    }
    return {k: _sup(v, shape) for k, v in out.items()}


def validate_assumptions(c: CoefficientSet, probes: int = 1000, bound_report: bool = True,
                         seed: int = 0, T: float = 1.0, boxes=(10.0, 100.0),
                         growth: float = 1.5) -> AssumptionReport:
    """Estimate suprema of the quantities the standing assumptions bound.

    A quantity is flagged as unbounded when its supremum on the large box
    exceeds ``growth`` times the one on the small box. Nothing is rejected.
    """
    if probes < 100:
        raise InvalidInputError("need at least 100 probes")
    rng = np.random.default_rng(seed)
    small = _quantities(c, *_probe(rng, probes, boxes[0], c.control_set, T))
    large = _quantities(c, *_probe(rng, probes, boxes[1], c.control_set, T))
    flagged = tuple(k for k in small if large[k] > growth * small[k] + 1e-12)
    grid = TimeGrid(T, 100)
    mass = max(float(c.kernel_sigma.mass(grid).max()), float(c.kernel_f.mass(grid).max()))
    return AssumptionReport(boxes[0], boxes[1], small, large if bound_report else {}, mass,
                            flagged)


_DERIVATIVES = {
    "dsigma_da": ("sigma", 1), "dsigma_dy": ("sigma", 2), "dsigma_dz": ("sigma", 3),
    "dh_dx": ("h", 1),
    "df_da": ("f", 1), "df_dy": ("f", 2), "df_dz": ("f", 3),
    "dPhi_dx": ("Phi", 0), "dPhi_dy": ("Phi", 1),
}


def check_derivatives(c: CoefficientSet, probes: int = 200, seed: int = 0, box: float = 3.0,
                      tol: float = 1e-3, T: float = 1.0) -> dict:
    """Worst relative mismatch between each declared partial and a central
    difference with step 1e-4 * max(1, |argument|)."""
    if probes < 100:
        raise InvalidInputError("need at least 100 probes")
    rng = np.random.default_rng(seed)
    t, a, x, y, z = _probe(rng, probes, box, c.control_set, T)
    args = {"sigma": (t, a, y, z), "f": (t, a, y, z), "h": (t, x), "Phi": (x, y)}
    report = {}
    for name, (base, slot) in _DERIVATIVES.items():
        fn, declared_fn = getattr(c, base), getattr(c, name)
        point = args[base]
        step = 1e-4 * np.maximum(1.0, np.abs(point[slot]))
        up = list(point)
        dn = list(point)
        up[slot] = point[slot] + step
        dn[slot] = point[slot] - step
        fd = (np.asarray(fn(*up), dtype=float) - np.asarray(fn(*dn), dtype=float)) / (2 * step)
        declared = np.broadcast_to(np.asarray(declared_fn(*point), dtype=float), t.shape)
        scale = np.maximum(1.0, np.abs(fd))
        report[name] = float(np.max(np.abs(declared - fd) / scale))
        if report[name] > tol:
            raise DerivativeMismatchError(name, report[name])
    return report
