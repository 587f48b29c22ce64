"""Command-line harness: single runs, factorization comparisons, cold-start campaigns.

Configuration is a YAML document::

    problem:            # ProblemSpec fields
      family: dpend
      formulation: inverse
    solver:             # SolverOptions fields
      max_iters: 150
    output_dir: out     # overridden by $ENDPOINT_DDP_OUTPUT_DIR, then --output-dir
    repetitions: 10
    cold_start: {seed: 0, magnitude: 0.5}
    variants: [schur, null-qr, null-lu]     # compare only
    formulations: [forward, inverse]        # campaign only

Every subcommand writes CSV tables plus a JSON summary into the output
directory. Solver non-convergence is data, not an error: the exit status is
nonzero only for configuration problems (2) and infrastructure failures (1).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from .direction import ENDPOINT_METHODS
from .errors import EndpointDDPError, SingularEndpointOperator
from .problems import ProblemSpec, build, perturbed_guess
from .solver import SolverOptions, SolverStats, solve

OUTPUT_ENV = "ENDPOINT_DDP_OUTPUT_DIR"

TRACE_SCHEMA_VERSION = 1
# (name, description); the order is the column order of trace.csv
TRACE_COLUMNS: tuple[tuple[str, str], ...] = (
    ("iteration", "accepted iteration, starting at 1"),
    ("cost", "objective value after the step"),
    ("normalized_cost", "cost divided by the cost of the initial guess"),
    ("endpoint_l1", "l1 norm of the endpoint residual"),
    ("dynamics_l1", "l1 norm of all dynamics gaps"),
    ("stagewise_l1", "l1 norm of all stagewise constraint residuals"),
    ("kkt", "max-norm KKT residual at the start of the iteration"),
    ("merit", "l1 merit after the step"),
    ("merit_reference", "nonmonotone acceptance reference"),
    ("alpha", "accepted step length"),
    ("reg", "regularization used for the accepted direction"),
    ("penalty", "merit penalty"),
    ("endpoint_method", "multiplier method actually used"),
    ("hessian_mode", "Hessian model actually used"),
    ("time_linearize", "seconds spent linearizing"),
    ("time_direction", "seconds spent in the Riccati sweeps and multiplier"),
    ("time_line_search", "seconds spent in rollouts"),
)
TIMING_COLUMNS = frozenset(name for name, _ in TRACE_COLUMNS if name.startswith("time_"))

COMPARE_COLUMNS = ("variant", "status", "iterations", "mean_direction_time", "min_direction_time", "max_deviation")
CAMPAIGN_COLUMNS = (
    "formulation", "trials", "successes", "success_rate", "mean_iterations", "mean_feasibility", "total_time",
)


# per-command defaults for fields left unset in the configuration
DEFAULT_REPETITIONS = {"run": 1, "compare": 5, "campaign": 10}
DEFAULT_MAGNITUDE = {"run": 0.0, "compare": 0.0, "campaign": 0.5}


class ConfigError(EndpointDDPError):
    """Configuration could not be parsed; the message names the file, line and field."""


@dataclass
class RunConfig:
    problem: ProblemSpec
    solver: SolverOptions
    output_dir: Path = Path("endpoint-ddp-out")
    repetitions: int | None = None  # None: per-command default
    cold_seed: int = 0
    cold_magnitude: float | None = None  # None: per-command default
    variants: tuple[str, ...] = ENDPOINT_METHODS
    formulations: tuple[str, ...] = ("forward", "inverse")
    source: str = "<config>"


# configuration parsing


def _line_map(node: yaml.Node, prefix: str = "", out: dict[str, int] | None = None) -> dict[str, int]:
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key, value in node.value:
            path = f"{prefix}.{key.value}" if prefix else str(key.value)
            out[path] = key.start_mark.line + 1
            _line_map(value, path, out)
    return out


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def load_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse and validate a configuration document."""
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark is not None else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    lines = _line_map(node) if node is not None else {}

    def fail(path: str, message: str):
        line = lines.get(path)
        where = f"{source}:{line}" if line else source
        raise ConfigError(f"{where}: field '{path}': {message}")

    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    known = {"problem", "solver", "output_dir", "repetitions", "cold_start", "variants", "formulations"}
    for key in data:
        if key not in known:
            fail(str(key), f"unknown field (expected one of {', '.join(sorted(known))})")
    if "problem" not in data:
        raise ConfigError(f"{source}: missing required section 'problem'")

    def section(name: str, cls) -> dict[str, Any]:
        block = data.get(name) or {}
        if not isinstance(block, dict):
            fail(name, "must be a mapping")
        allowed = _fields(cls)
        for key in block:
            if key not in allowed:
                fail(f"{name}.{key}", "unknown field")
        return block

    pblock = section("problem", ProblemSpec)
    if "family" not in pblock:
        fail("problem", "missing required field 'family'")
    try:
        problem = ProblemSpec(**pblock)
    except (TypeError, ValueError, KeyError) as exc:
        fail(_culprit("problem", pblock, exc), str(exc))
    sblock = section("solver", SolverOptions)
    try:
        solver = SolverOptions(**sblock)
    except (TypeError, ValueError) as exc:
        fail(_culprit("solver", sblock, exc), str(exc))

    cfg = RunConfig(problem=problem, solver=solver, source=source)
    if "output_dir" in data:
        cfg.output_dir = Path(str(data["output_dir"]))
    if "repetitions" in data:
        reps = data["repetitions"]
        if not isinstance(reps, int) or isinstance(reps, bool) or reps < 1:
            fail("repetitions", "must be an integer >= 1")
        cfg.repetitions = reps
    cold = data.get("cold_start") or {}
    if not isinstance(cold, dict):
        fail("cold_start", "must be a mapping")
    for key in cold:
        if key not in ("seed", "magnitude"):
            fail(f"cold_start.{key}", "unknown field")
    if "seed" in cold:
        if not isinstance(cold["seed"], int) or isinstance(cold["seed"], bool):
            fail("cold_start.seed", "must be an integer")
        cfg.cold_seed = cold["seed"]
    if "magnitude" in cold:
        mag = cold["magnitude"]
        if not isinstance(mag, (int, float)) or isinstance(mag, bool) or mag < 0 or not math.isfinite(mag):
            fail("cold_start.magnitude", "must be a finite number >= 0")
        cfg.cold_magnitude = float(mag)
    if "variants" in data:
        cfg.variants = _name_list(data["variants"], ENDPOINT_METHODS, "variants", fail)
    if "formulations" in data:
        cfg.formulations = _name_list(data["formulations"], ("forward", "inverse"), "formulations", fail)
    return cfg


def _name_list(value, allowed, path, fail) -> tuple[str, ...]:
    if not isinstance(value, list) or not value:
        fail(path, "must be a non-empty list")
    for item in value:
        if item not in allowed:
            fail(path, f"unknown entry {item!r} (expected {', '.join(allowed)})")
    if len(set(value)) != len(value):
        fail(path, "entries must be unique")
    return tuple(value)


def _culprit(name: str, block: dict, exc: Exception) -> str:
    text = str(exc)
    for key in block:
        if key in text:
            return f"{name}.{key}"
    return name


def dump_config(cfg: RunConfig) -> str:
    """YAML text that :func:`load_config` maps back to ``cfg``."""
    doc: dict[str, Any] = {
        "problem": _plain(dataclasses.asdict(cfg.problem)),
        "solver": _plain(dataclasses.asdict(cfg.solver)),
        "output_dir": str(cfg.output_dir),
        "cold_start": {"seed": cfg.cold_seed},
        "variants": list(cfg.variants),
        "formulations": list(cfg.formulations),
    }
    if cfg.repetitions is not None:
        doc["repetitions"] = cfg.repetitions
    if cfg.cold_magnitude is not None:
        doc["cold_start"]["magnitude"] = cfg.cold_magnitude
    return yaml.safe_dump(doc, sort_keys=False)


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, np.ndarray)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def read_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read configuration: {exc.strerror}") from None
    return load_config(text, str(path))


def resolve_output_dir(cfg: RunConfig, override: str | None = None) -> Path:
    """Flag beats environment beats configuration file."""
    if override:
        return Path(override)
    env = os.environ.get(OUTPUT_ENV)
    if env:
        return Path(env)
    return cfg.output_dir


# output helpers


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path: Path, header: Sequence[str], rows: list[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _json_ready(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None if math.isnan(value) else ("inf" if value > 0 else "-inf")
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, np.generic):
        return _json_ready(value.item())
    return value


def write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_json_ready(payload), indent=2, sort_keys=True) + "\n")


def trace_manifest() -> dict:
    return {
        "schema_version": TRACE_SCHEMA_VERSION,
        "columns": [{"name": n, "description": d} for n, d in TRACE_COLUMNS],
        "timing_columns": sorted(TIMING_COLUMNS),
    }


def trace_rows(stats: SolverStats) -> list[list]:
    base = stats.initial_cost
    rows = []
    for rec in stats.records:
        norm = rec.cost / base if base not in (0.0,) and math.isfinite(base) else math.nan
        values = dataclasses.asdict(rec)
        values["normalized_cost"] = norm
        rows.append([values[name] for name, _ in TRACE_COLUMNS])
    return rows


# subcommands


def _with_defaults(cfg: RunConfig, command: str) -> RunConfig:
    return dataclasses.replace(
        cfg,
        repetitions=DEFAULT_REPETITIONS[command] if cfg.repetitions is None else cfg.repetitions,
        cold_magnitude=DEFAULT_MAGNITUDE[command] if cfg.cold_magnitude is None else cfg.cold_magnitude,
    )


def _guess(problem, cfg: RunConfig, seed: int):
    return perturbed_guess(problem, cfg.cold_magnitude, seed)


def run(cfg: RunConfig, out: Path) -> dict:
    """Solve once and write ``trace.csv``, ``trace_manifest.json`` and ``summary.json``."""
    cfg = _with_defaults(cfg, "run")
    problem = build(cfg.problem)
    xs, us = _guess(problem, cfg, cfg.cold_seed)
    it, stats = solve(problem, xs, us, cfg.solver)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "trace.csv", [n for n, _ in TRACE_COLUMNS], trace_rows(stats))
    write_json(out / "trace_manifest.json", trace_manifest())
    dyn, stg, end = it.gap_l1()
    summary = {
        "problem": problem.name,
        "status": stats.status,
        "message": stats.message,
        "iterations": stats.iterations,
        "initial_cost": stats.initial_cost,
        "final_cost": it.cost,
        "final_feasibility": end,
        "final_dynamics_l1": dyn,
        "final_stagewise_l1": stg,
        "final_kkt": stats.final_kkt,
        "total_time": stats.total_time,
        "trace_schema_version": TRACE_SCHEMA_VERSION,
    }
    write_json(out / "summary.json", summary)
    return summary


def compare(cfg: RunConfig, out: Path) -> dict:
    """Time each endpoint-multiplier variant from the same warm start."""
    cfg = _with_defaults(cfg, "compare")
    if len(cfg.variants) < 2:
        raise ConfigError(f"{cfg.source}: field 'variants': compare needs at least two of {', '.join(ENDPOINT_METHODS)}")
    problem = build(cfg.problem)
    xs, us = _guess(problem, cfg, cfg.cold_seed)
    results = {}
    reference = None
    for variant in cfg.variants:
        opts = dataclasses.replace(cfg.solver, endpoint_method=variant, endpoint_fallback=False)
        per_iter = []
        entry: dict[str, Any] = {"variant": variant}
        try:
            for _ in range(cfg.repetitions):
                it, stats = solve(problem, xs, us, opts)
                direction = sum(r.time_direction for r in stats.records)
                per_iter.append(direction / max(stats.iterations, 1))
        except SingularEndpointOperator:
            entry.update(status="FAILED(SingularEndpointOperator)", iterations=0, mean_direction_time=math.nan,
                         min_direction_time=math.nan, max_deviation=math.nan)
            results[variant] = entry
            continue
        if reference is None:
            reference = it
        deviation = max(float(np.abs(it.xs - reference.xs).max()), float(np.abs(it.us - reference.us).max()))
        entry.update(status=stats.status, iterations=stats.iterations, mean_direction_time=float(np.mean(per_iter)),
                     min_direction_time=float(np.min(per_iter)), max_deviation=deviation)
        results[variant] = entry
    ok = [e for e in results.values() if not e["status"].startswith("FAILED")]
    agree = bool(ok) and all(e["max_deviation"] <= 1e-6 for e in ok)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "compare.csv", COMPARE_COLUMNS, [[e[c] for c in COMPARE_COLUMNS] for e in results.values()])
    report = {"problem": problem.name, "repetitions": cfg.repetitions, "trajectories_agree": agree,
              "variants": list(results.values())}
    write_json(out / "compare.json", report)
    return report


def campaign(cfg: RunConfig, out: Path) -> dict:
    """Cold starts with seed ``seed + trial`` for each formulation."""
    cfg = _with_defaults(cfg, "campaign")
    rows = []
    trials = []
    for formulation in cfg.formulations:
        spec = dataclasses.replace(cfg.problem, formulation=formulation)
        problem = build(spec)
        t0 = time.perf_counter()
        outcomes = []
        for trial in range(cfg.repetitions):
            xs, us = _guess(problem, cfg, cfg.cold_seed + trial)
            try:
                it, stats = solve(problem, xs, us, cfg.solver)
                status, iters, feas = stats.status, stats.iterations, it.gap_l1()[2]
            except EndpointDDPError as exc:
                status, iters, feas = f"FAILED({type(exc).__name__})", 0, math.inf
            outcomes.append((status, iters, feas))
            trials.append({"formulation": formulation, "trial": trial, "seed": cfg.cold_seed + trial,
                           "status": status, "iterations": iters, "final_feasibility": feas})
        wins = [o for o in outcomes if o[0] == "Converged"]
        rows.append({
            "formulation": formulation,
            "trials": len(outcomes),
            "successes": len(wins),
            "success_rate": len(wins) / len(outcomes),
            "mean_iterations": float(np.mean([o[1] for o in wins])) if wins else math.nan,
            "mean_feasibility": float(np.mean([o[2] for o in outcomes])),
            "total_time": time.perf_counter() - t0,
        })
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "campaign.csv", CAMPAIGN_COLUMNS, [[r[c] for c in CAMPAIGN_COLUMNS] for r in rows])
    report = {"family": cfg.problem.family, "magnitude": cfg.cold_magnitude, "seed": cfg.cold_seed,
              "rows": rows, "trials": trials}
    write_json(out / "campaign.json", report)
    return report


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="endpoint-ddp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "solve one problem and write a per-iteration trace"),
        ("compare", "time endpoint multiplier variants from one warm start"),
        ("campaign", "cold-start success table for both formulations"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", "-c", required=True, help="YAML configuration file")
        p.add_argument("--output-dir", "-o", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
        p.add_argument("--seed", type=int, help="override cold_start.seed")
        p.add_argument("--repetitions", "-n", type=int, help="override repetitions")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = read_config(args.config)
        if args.seed is not None:
            cfg.cold_seed = args.seed
        if args.repetitions is not None:
            if args.repetitions < 1:
                raise ConfigError("--repetitions must be >= 1")
            cfg.repetitions = args.repetitions
        if args.command == "compare" and len(cfg.variants) < 2:
            raise ConfigError(f"{cfg.source}: field 'variants': compare needs at least two variants")
        out = resolve_output_dir(cfg, args.output_dir)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.command == "run":
            s = run(cfg, out)
            print(f"{s['problem']}: {s['status']} after {s['iterations']} iterations, "
                  f"endpoint l1 {s['final_feasibility']:.3e}, {s['total_time']:.2f} s")
        elif args.command == "compare":
            r = compare(cfg, out)
            for e in r["variants"]:
                print(f"{e['variant']:>8}  {e['status']:<34} mean {e['mean_direction_time']:.3e} s  "
                      f"min {e['min_direction_time']:.3e} s")
            print(f"trajectories agree to 1e-6: {r['trajectories_agree']}")
        else:
            r = campaign(cfg, out)
            for row in r["rows"]:
                print(f"{row['formulation']:>8}  iters {row['mean_iterations']:.1f}  "
                      f"feas {row['mean_feasibility']:.1e}  success {100 * row['success_rate']:.0f}%")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EndpointDDPError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"outputs written to {out}")
    return 0
