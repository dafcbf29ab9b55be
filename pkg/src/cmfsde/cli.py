"""cmfctl: command-line entry point.

    cmfctl <simulate|fixpoint|optimize|validate> --config PATH [--out DIR] [--seed U64] [--threads K]

Exit codes: 0 ok, 2 configuration, 3 numerical blow-up, 4 non-convergence,
5 validation failure. A manifest is written to the output directory before
any other output and completed when the command finishes.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from importlib import metadata

import numpy as np

from . import control, validation
from .config import COMMANDS, SEED_MAX, RunConfig, load
from .errors import CmfError, ConfigError, NumericalBlowupError, StaleLawError
from .fixed_point import picard_iterate
from .model import builtin_model
from .oracles import kalman_bucy
from .numerics import MarginalLawFlow, RngStream, TimeGrid
from .policy import LinearPolicy
from .simulator import simulate, run

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NONCONV, EXIT_VALIDATION = 0, 2, 3, 4, 5


def fmt(x) -> str:
    """17 significant digits; integers verbatim."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return format(float(x), ".17g")


def write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def _json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(type(x))


def _version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


class Manifest:
    """Written first, completed last. Wallclock lives here and nowhere else."""

    def __init__(self, out, cfg: RunConfig, command):
        self.path = os.path.join(out, "manifest.json")
        self.start = time.perf_counter()
        self.data = {"config_hash": cfg.hash(), "seed": cfg.seed, "version": _version(),
                     "command": command, "status": "running", "files": [], "wallclock": None}
        self.flush()

    def add(self, name):
        self.data["files"].append(name)

    def flush(self):
        _json(self.path, self.data)

    def finish(self, status, exit_code, **extra):
        self.data.update(status=status, exit_code=exit_code,
                         wallclock=time.perf_counter() - self.start, **extra)
        self.flush()


def _setup(cfg: RunConfig):
    c = builtin_model(cfg.model.name, **cfg.model.params)
    grid = TimeGrid(cfg.grid.T, cfg.grid.n)
    stream = RngStream(cfg.seed)
    p = cfg.policy
    u = LinearPolicy(tuple(p.theta), tuple(p.features), c.u_min, c.u_max, p.ewma_rate)
    return c, grid, stream, u


def cmd_simulate(cfg, out, man, threads):
    c, grid, stream, u = _setup(cfg)
    M, N = cfg.ensemble.M, cfg.ensemble.N
    if cfg.simulate.law == "dirac":
        ens = simulate(c, u, MarginalLawFlow.dirac(grid, c.x0), grid, M, N, stream, threads)
    else:
        ens = run(c, u, None, grid, M, N, stream, threads)
    times = grid.times
    keep = min(cfg.simulate.particles_dumped, N)
    man.add("ensemble.csv")
    write_csv(os.path.join(out, "ensemble.csv"), ("scenario", "particle", "step", "time", "X", "logL"),
              ((m, i, k, times[k], ens.X[k, m, i], ens.logL[k, m, i])
               for m in range(M) for i in range(keep) for k in range(grid.n + 1)))
    header = ["scenario", "step", "time", "Y", "U", "S", "S0", "ess"]
    kal = None
    summary = {"J": None}
    if c.name == "linear_gaussian":
        header.append("kalman_error")
        p = c.params
        m_k, _ = kalman_bucy(ens.Y, grid.dt, c.x0, p["sigma0"] + p["sigma_z"] * ens.controls, p["c"])
        kal = np.abs(ens.U.T - m_k)
        summary["kalman_error_time_avg_max"] = float(kal.mean(axis=1).max())

    def rows():
        for m in range(M):
            for k in range(grid.n + 1):
                r = [m, k, times[k], ens.Y[m, k], ens.U[k, m], ens.S[k, m], ens.S0[k, m], ens.ess[k, m]]
                if kal is not None:
                    r.append(kal[m, k])
                yield r

    man.add("scenarios.csv")
    write_csv(os.path.join(out, "scenarios.csv"), header, rows())
    if ens.coupled:
        est = control.cost(c, u, None, ens, cfg.cost_measure)
        summary.update(J=est.value, J_stderr=est.stderr)
    man.add("summary.json")
    _json(os.path.join(out, "summary.json"), summary)
    return EXIT_OK, {}


def _flow_rows(flow):
    for k, law in enumerate(flow.laws):
        for r, (x, w) in enumerate(zip(law.samples, law.weights)):
            yield k, flow.grid.times[k], r, x, w


def cmd_fixpoint(cfg, out, man, threads):
    c, grid, stream, u = _setup(cfg)
    fp = cfg.fixpoint
    rep = picard_iterate(c, u, None, grid, cfg.ensemble.M, cfg.ensemble.N, stream, fp.damping,
                         fp.tol, fp.max_iter, threads, pathspace=True)
    man.add("fixpoint.csv")
    write_csv(os.path.join(out, "fixpoint.csv"), ("iteration", "d_k", "residual", "fourth_moment_max"),
              [(k + 1, rep.distances[k], rep.residuals[k], rep.fourth_moments[k])
               for k in range(rep.evaluations)])
    man.add("flow.csv")
    write_csv(os.path.join(out, "flow.csv"), ("step", "time", "rank", "value", "weight"),
              _flow_rows(rep.flow))
    info = {"converged": rep.converged, "iterations": rep.iterations, "residual": rep.residual,
            "pathspace_w2": rep.pathspace_w2, "iteration_wallclock": rep.wallclock}
    return (EXIT_OK if rep.converged else EXIT_NONCONV), info


def cmd_optimize(cfg, out, man, threads):
    c, grid, stream, u = _setup(cfg)
    op = cfg.optimizer
    res = control.optimize(c, u, grid, cfg.ensemble.M, cfg.ensemble.N, stream,
                           max_iter=op.max_iter, step0=op.step, gtol=op.tol,
                           precondition=op.precondition, basis=tuple(op.basis),
                           cost_measure=cfg.cost_measure, threads=threads)
    man.add("trace.csv")
    write_csv(os.path.join(out, "trace.csv"), control.TRACE_COLUMNS, res.trace)
    man.add("policy.csv")
    with open(os.path.join(out, "policy.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("feature", "theta"))
        for f, t in zip(res.policy.features, res.policy.theta):
            w.writerow((f, fmt(t)))
    gap, gap_se = control.smp_condition(res.adjoint, res.ensemble, res.policy)
    info = {"J": res.J, "J_stderr": res.J_stderr, "converged": res.converged,
            "failed_steps": res.failed_steps, "smp_gap": gap, "smp_gap_stderr": gap_se}
    return EXIT_OK, info


def cmd_validate(cfg, out, man, threads):
    c, grid, stream, u = _setup(cfg)
    v = u.with_theta(tuple(cfg.validate.direction))
    rep = validation.run_suite(cfg.validate.suite, c, u, v, grid, cfg.ensemble.M, cfg.ensemble.N,
                               stream, threads)
    for name, tab in rep.tables.items():
        fname = f"{rep.suite}_{name}.csv"
        man.add(fname)
        write_csv(os.path.join(out, fname), _TABLE_HEADERS[name], tab.tolist())
    man.add("validation.json")
    _json(os.path.join(out, "validation.json"),
          {"suite": rep.suite, "passed": rep.passed, "failures": rep.failures,
           "metrics": {k: float(v) for k, v in rep.metrics.items()}})
    if not rep.passed:
        print(f"validation failed: {', '.join(rep.failures)} "
              f"{json.dumps(rep.metrics, default=float, sort_keys=True)}",
              file=sys.stderr)
        return EXIT_VALIDATION, {"failures": rep.failures}
    return EXIT_OK, {}


_TABLE_HEADERS = {
    "pairs": ("scale", "control_distance_sq", "sup_state_gap_sq"),
    "errors": ("theta", "state_error", "conditional_mean_error"),
    "first_order": ("theta", "remainder"),
}

_COMMANDS = {"simulate": cmd_simulate, "fixpoint": cmd_fixpoint, "optimize": cmd_optimize,
             "validate": cmd_validate}


def _u64(text):
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError("seed must be an integer") from None
    if not 0 <= v <= SEED_MAX:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _positive(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError("threads must be an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return v


def parser():
    ap = argparse.ArgumentParser(prog="cmfctl", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", required=True)
    ap.add_argument("--out", default=None, help="output directory (overrides the config)")
    ap.add_argument("--seed", type=_u64, default=None)
    ap.add_argument("--threads", type=_positive, default=None,
                    help="worker threads (default: CMFCTL_THREADS or 1)")
    return ap


def main(argv=None) -> int:
    ap = parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        cfg = load(args.config)
        changes = {"command": args.command}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["output_dir"] = args.out
        cfg = cfg.replace(**changes)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    man = Manifest(out, cfg, args.command)
    with open(os.path.join(out, "config.json"), "w", encoding="utf-8") as fh:
        fh.write(cfg.dumps())
    man.add("config.json")
    man.flush()
    try:
        code, info = _COMMANDS[args.command](cfg, out, man, args.threads)
    except NumericalBlowupError as exc:
        print(f"numerical blow-up: {exc}", file=sys.stderr)
        man.finish("failed", EXIT_NUMERIC, error=str(exc))
        return EXIT_NUMERIC
    except StaleLawError as exc:
        print(f"fixed point not reached: {exc}", file=sys.stderr)
        man.finish("failed", EXIT_NONCONV, error=str(exc))
        return EXIT_NONCONV
    except CmfError as exc:
        print(f"error: {exc}", file=sys.stderr)
        man.finish("failed", exc.exit_code, error=str(exc))
        return exc.exit_code
    man.finish("ok" if code == EXIT_OK else "failed", code, result=info)
    return code


if __name__ == "__main__":
    sys.exit(main())
