"""Run configuration: a versioned JSON document with strict keys and range checks.

Example::

    {
      "schema_version": 1,
      "command": "fixpoint",
      "model": {"name": "bounded_sigmoid", "params": {}},
      "grid": {"T": 1.0, "n": 100},
      "ensemble": {"M": 64, "N": 2000},
      "seed": 11
    }

Every section other than ``schema_version`` has defaults.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .control import DEFAULT_BASIS
from .errors import ConfigError
from .model import BUILTIN_DEFAULTS
from .policy import FEATURES
from .validation import SUITES

SCHEMA_VERSION = 1
COMMANDS = ("simulate", "fixpoint", "optimize", "validate")
SEED_MAX = 2**64 - 1


@dataclass(frozen=True)
class ModelSection:
    name: str = "bounded_sigmoid"
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class GridSection:
    T: float = 1.0
    n: int = 100


@dataclass(frozen=True)
class EnsembleSection:
    M: int = 64
    N: int = 2000


@dataclass(frozen=True)
class PolicySection:
    features: tuple = ("const",)
    theta: tuple = (0.0,)
    ewma_rate: float = 1.0


@dataclass(frozen=True)
class FixpointSection:
    damping: float = 1.0
    tol: float = 1e-2
    max_iter: int = 20


@dataclass(frozen=True)
class OptimizerSection:
    step: float = 1.0
    tol: float = 1e-6
    max_iter: int = 30
    basis: tuple = DEFAULT_BASIS
    precondition: bool = True


@dataclass(frozen=True)
class SimulateSection:
    law: str = "dirac"
    particles_dumped: int = 16


@dataclass(frozen=True)
class ValidateSection:
    suite: str = "filter"
    direction: tuple = (0.8,)


@dataclass(frozen=True)
class RunConfig:
    command: str = "simulate"
    model: ModelSection = ModelSection()
    grid: GridSection = GridSection()
    ensemble: EnsembleSection = EnsembleSection()
    seed: int = 0
    policy: PolicySection = PolicySection()
    fixpoint: FixpointSection = FixpointSection()
    optimizer: OptimizerSection = OptimizerSection()
    simulate: SimulateSection = SimulateSection()
    validate: ValidateSection = ValidateSection()
    cost_measure: str = "q0"
    output_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        return _lists(d)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def hash(self) -> str:
        """SHA-256 of the canonical serialization."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        d = self.to_dict()
        d.update(changes)
        return from_dict(d)


def _lists(obj):
    if isinstance(obj, dict):
        return {k: _lists(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_lists(v) for v in obj]
    return obj


_SECTIONS = {
    "model": ModelSection, "grid": GridSection, "ensemble": EnsembleSection,
    "policy": PolicySection, "fixpoint": FixpointSection, "optimizer": OptimizerSection,
    "simulate": SimulateSection, "validate": ValidateSection,
}


def _typed(where, name, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}.{name} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}.{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}.{name} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}.{name} must be a string")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where}.{name} must be a list")
        return tuple(value)
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}.{name} must be an object")
        return dict(value)
    raise ConfigError(f"{where}.{name}: unsupported field")


def _section(cls, where, data):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    proto = cls()
    kwargs = {k: _typed(where, k, v, getattr(proto, k)) for k, v in data.items()}
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "schema_version" not in data:
        raise ConfigError("missing schema_version")
    if data["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {data['schema_version']!r}")
    top = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}")
    proto = RunConfig()
    kwargs = {}
    for k, v in data.items():
        if k in _SECTIONS:
            kwargs[k] = _section(_SECTIONS[k], k, v)
        else:
            kwargs[k] = _typed("config", k, v, getattr(proto, k))
    cfg = RunConfig(**kwargs)
    check(cfg)
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return from_dict(data)


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None


def check(cfg: RunConfig):
    """Range and consistency checks; raises ConfigError."""
    def need(ok, msg):
        if not ok:
            raise ConfigError(msg)

    need(cfg.command in COMMANDS, f"command must be one of {COMMANDS}")
    need(cfg.model.name in BUILTIN_DEFAULTS, f"unknown model {cfg.model.name!r}")
    known = BUILTIN_DEFAULTS[cfg.model.name]
    bad = sorted(set(cfg.model.params) - set(known))
    need(not bad, f"unknown model parameter(s): {', '.join(bad)}")
    for k, v in cfg.model.params.items():
        need(isinstance(v, (int, float)) and not isinstance(v, bool),
             f"model.params.{k} must be a number")
    need(cfg.grid.T > 0, "grid.T must be positive")
    need(10 <= cfg.grid.n <= 100_000, "grid.n must lie in [10, 100000]")
    need(2 <= cfg.ensemble.M <= 10_000, "ensemble.M must lie in [2, 10000]")
    need(2 <= cfg.ensemble.N <= 1_000_000, "ensemble.N must lie in [2, 1000000]")
    need(0 <= cfg.seed <= SEED_MAX, "seed must be an unsigned 64-bit integer")
    p = cfg.policy
    need(len(p.features) >= 1 and all(f in FEATURES for f in p.features),
         f"policy.features must be drawn from {FEATURES}")
    need(len(set(p.features)) == len(p.features), "policy.features must be distinct")
    need(len(p.theta) == len(p.features), "policy.theta must match policy.features")
    need(all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in p.theta),
         "policy.theta must be numbers")
    need(p.ewma_rate > 0, "policy.ewma_rate must be positive")
    fp = cfg.fixpoint
    need(0 < fp.damping <= 1, "fixpoint.damping must lie in (0, 1]")
    need(fp.tol > 0, "fixpoint.tol must be positive")
    need(1 <= fp.max_iter <= 10_000, "fixpoint.max_iter must lie in [1, 10000]")
    op = cfg.optimizer
    need(op.step > 0 and op.tol > 0, "optimizer.step and optimizer.tol must be positive")
    need(1 <= op.max_iter <= 10_000, "optimizer.max_iter must lie in [1, 10000]")
    need(len(op.basis) >= 1 and all(b in DEFAULT_BASIS for b in op.basis),
         f"optimizer.basis must be drawn from {DEFAULT_BASIS}")
    need(cfg.simulate.law in ("dirac", "coupled"), "simulate.law must be 'dirac' or 'coupled'")
    need(cfg.simulate.particles_dumped >= 0, "simulate.particles_dumped must be >= 0")
    need(cfg.validate.suite in SUITES, f"validate.suite must be one of {SUITES}")
    need(len(cfg.validate.direction) == len(p.features),
         "validate.direction must match policy.features")
    need(cfg.cost_measure in ("q0", "pu"), "cost_measure must be 'q0' or 'pu'")
    need(cfg.output_dir != "", "output_dir must be non-empty")
