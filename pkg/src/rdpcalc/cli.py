"""Command-line front end: ``rdpcalc {solve,sweep,oracle,discretize}``.

Configuration comes from a preset, then an optional JSON document
(``--config``), then individual flags; later sources override earlier ones.
Exit codes: 0 success, 2 invalid configuration, 3 solver failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .baselines import OracleConfig, brute_force_rdp, random_instance
from .core import (ConfigurationError, CostMatrix, DiscreteSource, DistortionMatrix,
                   DomainError, InfeasibleError, InnerLoopError, NumericError,
                   PerceptionMeasure, RdpError, SolverConfig)
from .discretize import (GaussianSpec, discretize_gaussian, hamming_distortion,
                         squared_error_matrix, truncated_tail_mass)
from .kl_solver import KlProblem, solve_kl
from .ot_solver import OtProblem, solve_ot, solve_ot_continuation

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3

CSV_FIELDS = ["D", "P", "rate_nats", "rate_bits", "achieved_distortion",
              "achieved_perception", "outer_iters", "converged"]

PRESETS = {
    "binary-tv": {"source": "bernoulli:0.1", "distortion": "hamming", "perception": "tv",
                  "P": 0.02, "D_grid": "0.03:0.15:0.03", "epsilon": 0.01},
    "gaussian-kl": {"source": "gaussian:0,2,8,0.5", "distortion": "squared",
                    "perception": "kl", "P": 0.2, "D_grid": "1:5:1"},
    "gaussian-w2": {"source": "gaussian:0,2,8,0.5", "distortion": "squared",
                    "perception": "wasserstein:squared", "P": 0.2, "D_grid": "1:5:1",
                    "epsilon": 0.01},
}

# keys accepted in a --config document, with the flag that sets each one
CONFIG_KEYS = ("source", "distortion", "perception", "D", "P", "D_grid", "P_grid",
               "epsilon", "tol_inner", "tol_outer", "max_inner", "max_outer", "trace",
               "format", "seed", "output", "random")


@dataclass
class RunConfig:
    source: DiscreteSource
    d: DistortionMatrix
    perception: PerceptionMeasure
    D_values: list
    P_values: list
    solver: SolverConfig
    seed: int = 0
    trace: Optional[str] = None
    fmt: str = "json"
    output: Optional[str] = None
    meta: dict = field(default_factory=dict)


class CliError(Exception):
    def __init__(self, message, code=EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# parsing helpers


def parse_grid(text: str) -> list:
    """``lo:hi:step`` (inclusive of ``hi`` up to rounding) or a comma list."""
    text = str(text).strip()
    try:
        return _parse_grid(text)
    except ValueError as exc:
        raise ConfigurationError(f"grid {text!r} is not numeric") from exc


def _parse_grid(text):
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigurationError(f"grid {text!r} must be lo:hi:step")
        lo, hi, step = (float(x) for x in parts)
        if not step > 0 or hi < lo:
            raise ConfigurationError(f"grid {text!r} needs step > 0 and hi >= lo")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        values = [round(lo + k * step, 12) for k in range(n)]
    else:
        values = [float(x) for x in text.split(",") if x.strip()]
    if not values:
        raise ConfigurationError("grid is empty")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigurationError("grid values must be strictly increasing")
    return values


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc


def _gaussian_spec(spec: str) -> GaussianSpec:
    args = spec.split(":", 1)[1] if ":" in spec else ""
    vals = [float(x) for x in args.split(",") if x.strip()]
    if len(vals) > 4:
        raise ConfigurationError("gaussian source takes mu,sigma,S,delta")
    return GaussianSpec(*vals)


def load_source(spec: str) -> DiscreteSource:
    spec = str(spec)
    if spec.startswith("bernoulli:"):
        return DiscreteSource.bernoulli(float(spec.split(":", 1)[1]))
    if spec.startswith("gaussian"):
        return discretize_gaussian(_gaussian_spec(spec))
    if os.path.exists(spec):
        doc = _read_json(spec)
        if not isinstance(doc, dict) or "p" not in doc:
            raise ConfigurationError("source file must hold {points, p}")
        return DiscreteSource.from_probs(doc["p"], doc.get("points"))
    raise ConfigurationError(f"unrecognized source {spec!r}")


def load_matrix(path: str) -> np.ndarray:
    doc = _read_json(path)
    try:
        rows, cols, data = int(doc["rows"]), int(doc["cols"]), doc["data"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigurationError("matrix file must hold {rows, cols, data}") from exc
    if len(data) != rows * cols:
        raise ConfigurationError(f"matrix data has {len(data)} entries, expected {rows * cols}")
    return np.asarray(data, dtype=float).reshape(rows, cols)


def _square_points(source: DiscreteSource):
    return source.points, source.points


def load_distortion(spec: str, source: DiscreteSource) -> DistortionMatrix:
    if spec == "hamming":
        return hamming_distortion(source.size)
    if spec == "squared":
        return squared_error_matrix(*_square_points(source))
    return DistortionMatrix(load_matrix(spec))


def load_perception(spec: str, source: DiscreteSource, d: DistortionMatrix) -> PerceptionMeasure:
    spec = str(spec)
    if spec in ("kl", "tv"):
        return PerceptionMeasure(spec)
    if spec.startswith("wasserstein"):
        cost = spec.split(":", 1)[1] if ":" in spec else "squared"
        if cost == "squared":
            m, n = d.d.shape
            if m != n:
                raise ConfigurationError("squared transport cost needs M = N")
            c = CostMatrix(squared_error_matrix(*_square_points(source)).d)
        else:
            c = CostMatrix(load_matrix(cost))
        return PerceptionMeasure("wasserstein", c)
    raise ConfigurationError(f"unrecognized perception {spec!r}")


def _merge(args) -> dict:
    cfg = {}
    if args.preset:
        cfg.update(PRESETS[args.preset])
    if args.config:
        doc = _read_json(args.config)
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        unknown = set(doc) - set(CONFIG_KEYS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(doc)
    for key in CONFIG_KEYS:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    return cfg


def build_config(args, need_budgets=True) -> RunConfig:
    cfg = _merge(args)
    if "source" not in cfg:
        raise ConfigurationError("no source given (use --source or --preset)")
    source = load_source(cfg["source"])
    d = load_distortion(cfg.get("distortion", "hamming"), source)
    perception = load_perception(cfg.get("perception", "kl"), source, d)

    D_values = ([float(cfg["D"])] if "D" in cfg else
                parse_grid(cfg["D_grid"]) if "D_grid" in cfg else None)
    P_values = ([float(cfg["P"])] if "P" in cfg and "P_grid" not in cfg else
                parse_grid(cfg["P_grid"]) if "P_grid" in cfg else None)
    if need_budgets and (D_values is None or P_values is None):
        raise ConfigurationError("both D and P budgets are required")

    defaults = SolverConfig()
    solver = SolverConfig(
        tol_inner=float(cfg.get("tol_inner", defaults.tol_inner)),
        tol_outer=float(cfg.get("tol_outer", defaults.tol_outer)),
        max_inner=int(cfg.get("max_inner", defaults.max_inner)),
        max_outer=int(cfg.get("max_outer", defaults.max_outer)),
        epsilon=float(cfg.get("epsilon", defaults.epsilon)))
    fmt = cfg.get("format", "json")
    if fmt not in ("json", "csv"):
        raise ConfigurationError("format must be json or csv")
    meta = {"source": str(cfg["source"]), "perception": perception.kind}
    if str(cfg["source"]).startswith("gaussian"):
        # the truncated tails are renormalized away; report how much that was
        meta["truncated_tail_mass"] = truncated_tail_mass(_gaussian_spec(str(cfg["source"])))
    return RunConfig(source, d, perception, D_values, P_values, solver,
                     seed=int(cfg.get("seed", 0)), trace=cfg.get("trace"), fmt=fmt,
                     output=cfg.get("output"), meta=meta)


# --------------------------------------------------------------------------
# solving


def epsilon_schedule(eps: float, start: float = 0.01) -> list:
    """Decades from ``start`` down to ``eps``; just ``[eps]`` if ``eps >= start``."""
    if eps >= start:
        return [eps]
    sched = [start]
    while sched[-1] * 0.1 > eps * (1 + 1e-9):
        sched.append(sched[-1] * 0.1)
    sched.append(eps)
    return sched


def solve_cell(rc: RunConfig, D: float, P: float):
    if rc.perception.kind == "kl":
        return solve_kl(KlProblem(rc.source, rc.d, D, P), rc.solver)
    m, n = rc.d.d.shape
    c = rc.perception.cost_matrix(m, n)
    problem = OtProblem(rc.source, rc.d, c, D, P, rc.solver.epsilon)
    sched = epsilon_schedule(rc.solver.epsilon)
    if len(sched) == 1:
        return solve_ot(problem, rc.solver)
    return solve_ot_continuation(problem, sched, rc.solver)


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def result_record(D, P, sol, rc: RunConfig) -> dict:
    duals = {}
    for k, v in sol.duals.items():
        duals[k] = [float(t) for t in v] if isinstance(v, list) else float(v)
    rec = {"D": D, "P": P, "rate_nats": sol.rate_nats, "rate_bits": sol.rate_bits,
           "achieved_distortion": sol.achieved_distortion,
           "achieved_perception": sol.achieved_perception,
           "outer_iters": sol.outer_iters, "converged": bool(sol.converged),
           "duals": duals}
    if sol.regularized_objective is not None:
        rec["regularized_objective"] = sol.regularized_objective
    rec["metadata"] = dict(rc.meta, seed=rc.seed)
    return rec


def failed_record(D, P, message, rc: RunConfig) -> dict:
    return {"D": D, "P": P, "rate_nats": None, "rate_bits": None,
            "achieved_distortion": None, "achieved_perception": None,
            "outer_iters": 0, "converged": False, "duals": {}, "error": message,
            "metadata": dict(rc.meta, seed=rc.seed)}


def _emit(text: str, path: Optional[str]):
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for rec in records:
        row = []
        for key in CSV_FIELDS:
            v = rec[key]
            if v is None:
                row.append("")
            elif isinstance(v, (bool, np.bool_)):
                row.append(str(bool(v)).lower())
            elif isinstance(v, (int, np.integer)):
                row.append(str(int(v)))
            else:
                row.append(repr(float(v)))
        writer.writerow(row)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


def cmd_solve(rc: RunConfig) -> int:
    if len(rc.D_values) != 1 or len(rc.P_values) != 1:
        raise ConfigurationError("solve takes scalar D and P; use sweep for grids")
    D, P = rc.D_values[0], rc.P_values[0]
    try:
        sol = solve_cell(rc, D, P)
    except (InfeasibleError, InnerLoopError, NumericError) as exc:
        rec = failed_record(D, P, str(exc), rc)
        _emit(_json_text(rec) if rc.fmt == "json" else _csv_text([rec]), rc.output)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    if rc.trace:
        with open(rc.trace, "w") as fh:
            fh.write(sol.trace.to_tsv())
    rec = result_record(D, P, sol, rc)
    _emit(_json_text(rec) if rc.fmt == "json" else _csv_text([rec]), rc.output)
    return EXIT_OK if sol.converged else EXIT_SOLVER


def monotonicity_warnings(records, D_values, P_values) -> list:
    """Value-function checks: rate non-increasing in D (fixed P) and in P (fixed D)."""
    rate = {(r["D"], r["P"]): r["rate_nats"] for r in records if r["converged"]}
    msgs = []
    slack = 1e-7
    for P in P_values:
        for D0, D1 in zip(D_values, D_values[1:]):
            a, b = rate.get((D0, P)), rate.get((D1, P))
            if a is not None and b is not None and b > a + slack:
                msgs.append(f"rate increases from D={D0} to D={D1} at P={P}")
    for D in D_values:
        for P0, P1 in zip(P_values, P_values[1:]):
            a, b = rate.get((D, P0)), rate.get((D, P1))
            if a is not None and b is not None and b > a + slack:
                msgs.append(f"rate increases from P={P0} to P={P1} at D={D}")
    return msgs


def cmd_sweep(rc: RunConfig, check_monotone: bool = False) -> int:
    records = []
    warnings = 0
    for D in rc.D_values:           # D outer, P inner
        for P in rc.P_values:
            try:
                sol = solve_cell(rc, D, P)
                rec = result_record(D, P, sol, rc)
                if not sol.converged:
                    warnings += 1
            except (InfeasibleError, InnerLoopError, NumericError) as exc:
                rec = failed_record(D, P, str(exc), rc)
                warnings += 1
            records.append(rec)
    if check_monotone:
        for msg in monotonicity_warnings(records, rc.D_values, rc.P_values):
            print(f"warning: {msg}", file=sys.stderr)
            warnings += 1
    _emit(_csv_text(records) if rc.fmt == "csv" else _json_text(records), rc.output)
    if warnings:
        print(f"warning: {warnings} cell(s) did not converge or failed checks",
              file=sys.stderr)
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.random is not None:
        if args.random not in (2, 3):
            raise ConfigurationError("random oracle instances are 2x2 or 3x3")
        kind = args.perception or "kl"
        if kind not in ("kl", "tv"):
            raise ConfigurationError("random oracle instances support kl and tv")
        rng = np.random.default_rng(args.seed or 0)
        source, d, D, P = random_instance(rng, args.random, kind)
        if args.D is not None:
            D = float(args.D)
        if args.P is not None:
            P = float(args.P)
        solver = SolverConfig(epsilon=args.epsilon if args.epsilon is not None else 0.001)
        rc = RunConfig(source, d, PerceptionMeasure(kind), [D], [P], solver,
                       seed=args.seed or 0, fmt="json", output=args.output,
                       meta={"source": f"random:{args.random}", "perception": kind})
    else:
        if args.epsilon is None:
            args.epsilon = 0.001
        rc = build_config(args)
        if len(rc.D_values) != 1 or len(rc.P_values) != 1:
            raise ConfigurationError("oracle takes scalar D and P")
    m, n = rc.d.d.shape
    if m * (n - 1) > 8:
        raise ConfigurationError(f"{m}x{n} instance is too large for the oracle (max 3x3)")
    D, P = rc.D_values[0], rc.P_values[0]
    oracle = brute_force_rdp(rc.source.p, rc.d, rc.perception, D, P, OracleConfig())
    try:
        sol = solve_cell(rc, D, P)
    except (InfeasibleError, InnerLoopError, NumericError) as exc:
        raise CliError(str(exc), EXIT_SOLVER) from exc
    rec = {"D": D, "P": P, "oracle_rate": oracle, "solver_rate": sol.rate_nats,
           "abs_diff": abs(sol.rate_nats - oracle), "converged": bool(sol.converged),
           "metadata": dict(rc.meta, seed=rc.seed)}
    _emit(_json_text(rec), rc.output)
    return EXIT_OK if sol.converged else EXIT_SOLVER


def cmd_discretize(args) -> int:
    cfg = _merge(args)
    spec = str(cfg.get("source", "gaussian"))
    if not spec.startswith("gaussian"):
        raise ConfigurationError("discretize needs a gaussian source")
    gspec = _gaussian_spec(spec)
    src = discretize_gaussian(gspec)
    doc = {"points": src.points.tolist(), "p": src.p.tolist(),
           "metadata": {"N": src.size, "truncated_tail_mass": truncated_tail_mass(gspec)}}
    _emit(_json_text(doc), cfg.get("output"))
    print(f"N={src.size} truncated_tail_mass={truncated_tail_mass(gspec)!r}", file=sys.stderr)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _add_common(p, with_budgets=True):
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--config", help="JSON document with run settings (flags override it)")
    p.add_argument("--source", help="bernoulli:P | gaussian:mu,sigma,S,delta | FILE.json")
    p.add_argument("--distortion", help="hamming | squared | matrix FILE.json")
    p.add_argument("--perception", help="kl | tv | wasserstein[:squared|:FILE.json]")
    p.add_argument("--output", "-o", help="write the result here instead of stdout")
    if with_budgets:
        p.add_argument("--D", type=float)
        p.add_argument("--P", type=float)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--tol-inner", dest="tol_inner", type=float)
        p.add_argument("--tol-outer", dest="tol_outer", type=float)
        p.add_argument("--max-inner", dest="max_inner", type=int)
        p.add_argument("--max-outer", dest="max_outer", type=int)
        p.add_argument("--format", choices=("json", "csv"))
        p.add_argument("--seed", type=int)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rdpcalc", description="Discrete rate-distortion-perception functions.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve one (D, P) point")
    _add_common(p_solve)
    p_solve.add_argument("--trace", help="write the per-iteration trace (TSV) here")

    p_sweep = sub.add_parser("sweep", help="solve a grid of (D, P) points")
    _add_common(p_sweep)
    p_sweep.add_argument("--D-grid", dest="D_grid", help="lo:hi:step or comma list")
    p_sweep.add_argument("--P-grid", dest="P_grid", help="lo:hi:step or comma list")
    p_sweep.add_argument("--check-monotone", action="store_true",
                         help="warn when emitted rates break monotonicity in D or P")

    p_oracle = sub.add_parser("oracle", help="compare the solver with a brute-force oracle")
    _add_common(p_oracle)
    p_oracle.add_argument("--random", type=int, choices=(2, 3),
                          help="use a seeded random 2x2 or 3x3 instance")

    p_disc = sub.add_parser("discretize", help="write a discretized Gaussian source file")
    _add_common(p_disc, with_budgets=False)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            return cmd_solve(build_config(args))
        if args.command == "sweep":
            rc = build_config(args, need_budgets=False)
            if rc.D_values is None or rc.P_values is None:
                raise ConfigurationError("sweep needs D (or --D-grid) and P (or --P-grid)")
            return cmd_sweep(rc, check_monotone=args.check_monotone)
        if args.command == "oracle":
            return cmd_oracle(args)
        return cmd_discretize(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RdpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
