"""Command line front end: config parsing, alpha sweeps, overlap caching, outputs.

Examples
--------
::

    accim run --map tent3 --resolution 1000 --alpha 0.6667
    accim sweep --map saddle --resolution 100x100 --alpha-range 0.3:0.75:0.15 --out DIR
    accim overlap --map tent3 --resolution 1000 --cache tent.ovl
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import AccimError, CacheFormatError, ConfigError, DualDivergenceError, NonConvergenceError
from .partition import OverlapData, build_partition, compute_overlap, load_overlap, read_overlap_header, save_overlap
from .reduction import ReducedProblem, reduce_domain, write_mask_csv
from .solver import MaxentSolution, SolverConfig, solve, write_density_csv
from .system import OpenSystem, builtin_system, system_from_dict

__all__ = [
    "RunConfig",
    "SweepRow",
    "SweepReport",
    "alpha_grid",
    "parse_resolution",
    "parse_alpha_range",
    "load_config",
    "config_from_mapping",
    "resolve_system",
    "load_or_compute_overlap",
    "run",
    "main",
]

log = logging.getLogger("accim")

SWEEP_COLUMNS = ["alpha", "entropy", "neg_entropy", "dual_value", "survivor_mass",
                 "residual_sup", "iterations", "converged"]

_CONFIG_KEYS = {"map", "resolution", "backend", "samples", "seed", "alpha", "tol",
                "max_iter", "divergence_bound", "out", "cache", "workers", "refined"}


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.17g}"


def alpha_grid(start: float, stop: float, step: float) -> list:
    """Inclusive grid ``start, start+step, ..., <= stop`` (float drift absorbed)."""
    if not step > 0:
        raise ConfigError(f"alpha.step must be > 0, got {step!r}")
    if start > stop:
        raise ConfigError(f"alpha range is empty (start {start!r} > stop {stop!r})")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(count)]


def parse_alpha_range(text: str) -> list:
    """``"start:stop:step"`` -> list of alpha values."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--alpha-range expects start:stop:step, got {text!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError:
        raise ConfigError(f"--alpha-range has a non-numeric part: {text!r}") from None
    return alpha_grid(start, stop, step)


def parse_resolution(value) -> tuple:
    """``1000``, ``"1000"``, ``"100x100"`` or ``[100, 100]`` -> tuple of counts."""
    if isinstance(value, str):
        parts = value.lower().replace(",", "x").split("x")
    elif isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        parts = [value]
    try:
        counts = []
        for p in parts:
            f = float(p)
            if f != int(f):
                raise ValueError
            counts.append(int(f))
    except (TypeError, ValueError):
        raise ConfigError(f"resolution: cannot parse {value!r}") from None
    if not counts or any(c < 1 for c in counts):
        raise ConfigError(f"resolution: counts must be >= 1, got {value!r}")
    return tuple(counts)


@dataclass(frozen=True)
class RunConfig:
    map: object = "tent3"
    resolution: Optional[tuple] = None
    backend: str = "exact"
    samples: int = 1000
    seed: int = 0
    alphas: tuple = (2.0 / 3.0,)
    tol: float = 1e-12
    max_iter: int = 1_000_000
    divergence_bound: float = 1e12
    out: Optional[Path] = None
    cache: Optional[Path] = None
    workers: int = 1
    refined: bool = False

    def __post_init__(self):
        if not self.alphas:
            raise ConfigError("alpha: no values requested")
        for a in self.alphas:
            if not (0.0 < float(a) < 1.0):
                raise ConfigError(f"alpha: every value must lie in (0, 1), got {a!r}")
        if self.backend not in ("exact", "sampled"):
            raise ConfigError(f"backend: expected 'exact' or 'sampled', got {self.backend!r}")
        if int(self.samples) < 1:
            raise ConfigError("samples: must be >= 1")
        if int(self.workers) < 1:
            raise ConfigError("workers: must be >= 1")
        if self.resolution is not None:
            object.__setattr__(self, "resolution", parse_resolution(self.resolution))
        SolverConfig(alpha=float(self.alphas[0]), tol=self.tol, max_iter=self.max_iter,
                     divergence_bound=self.divergence_bound)

    def solver_config(self, alpha: float) -> SolverConfig:
        return SolverConfig(alpha=float(alpha), tol=self.tol, max_iter=int(self.max_iter),
                            divergence_bound=self.divergence_bound)


@dataclass(frozen=True)
class SweepRow:
    alpha: float
    entropy: float
    neg_entropy: float
    dual_value: float
    survivor_mass: float
    residual_sup: float
    iterations: int
    converged: bool
    error: str = ""

    def values(self) -> list:
        return [getattr(self, name) for name in SWEEP_COLUMNS]


@dataclass
class SweepReport:
    rows: list
    argmax_alpha: Optional[float]
    solutions: dict = field(default_factory=dict, repr=False)
    reduced: Optional[ReducedProblem] = field(default=None, repr=False)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SWEEP_COLUMNS)
            for row in self.rows:
                writer.writerow([_fmt(v) for v in row.values()])

    def to_dict(self) -> dict:
        return {
            "argmax_alpha": self.argmax_alpha,
            "kept_cells": None if self.reduced is None else self.reduced.kept_count,
            "rows": [
                {**{name: getattr(r, name) for name in SWEEP_COLUMNS}, "error": r.error}
                for r in self.rows
            ],
        }

    def format_table(self) -> str:
        lines = ["   alpha          entropy       dual_value    survivor_mass  iters  ok"]
        for r in self.rows:
            lines.append(f"{r.alpha:8.4f} {r.entropy:16.9e} {r.dual_value:16.9e} "
                         f"{r.survivor_mass:16.12f} {r.iterations:6d}  {'y' if r.converged else 'n'}")
        lines.append(f"argmax alpha: {self.argmax_alpha}")
        return "\n".join(lines)


# --- config files --------------------------------------------------------------

def _key_lines(text: str) -> dict:
    """1-based line number of each top-level key in a YAML/JSON document."""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return {}
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value if hasattr(k, "value")}


def load_config(path) -> dict:
    """Parse a YAML (or JSON) config file into a plain mapping.

    Errors carry the file name and line number of the offending text.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{path}: {where}: {exc.problem}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    lines = _key_lines(text)
    try:
        config_from_mapping(data)
    except ConfigError as exc:
        key = str(exc).split(":", 1)[0].split(".", 1)[0].split("[", 1)[0]
        line = f" (line {lines[key]})" if key in lines else ""
        raise ConfigError(f"{path}{line}: {exc}") from None
    return data


def config_from_mapping(data: dict, **overrides) -> RunConfig:
    """Validate a config mapping; keyword ``overrides`` (not None) win."""
    merged = dict(data)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(merged) - _CONFIG_KEYS - {"alphas"}
    if unknown:
        raise ConfigError(f"{sorted(unknown)[0]}: unknown config field")
    kwargs = {}
    if "map" in merged:
        kwargs["map"] = merged["map"]
        if isinstance(merged["map"], str):
            builtin_system(merged["map"])
        elif isinstance(merged["map"], dict):
            system_from_dict(merged["map"])
        else:
            raise ConfigError("map: expected a built-in name or a branch mapping")
    if "resolution" in merged:
        kwargs["resolution"] = parse_resolution(merged["resolution"])
    for key, conv in (("backend", str), ("samples", int), ("seed", int), ("tol", float),
                      ("max_iter", int), ("divergence_bound", float), ("workers", int),
                      ("refined", bool)):
        if key in merged:
            try:
                kwargs[key] = conv(merged[key])
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: invalid value {merged[key]!r}") from None
    for key in ("out", "cache"):
        if merged.get(key) is not None:
            kwargs[key] = Path(merged[key])
    if "alphas" in merged:
        kwargs["alphas"] = tuple(float(a) for a in merged["alphas"])
    elif "alpha" in merged:
        kwargs["alphas"] = tuple(_parse_alpha_field(merged["alpha"]))
    return RunConfig(**kwargs)


def _parse_alpha_field(value) -> list:
    if isinstance(value, dict):
        missing = {"start", "stop", "step"} - set(value)
        if missing:
            raise ConfigError(f"alpha: range is missing {sorted(missing)[0]!r}")
        try:
            start, stop, step = (float(value[k]) for k in ("start", "stop", "step"))
        except (TypeError, ValueError):
            raise ConfigError("alpha: range bounds must be numbers") from None
        return alpha_grid(start, stop, step)
    if isinstance(value, str) and ":" in value:
        return parse_alpha_range(value)
    values = value if isinstance(value, (list, tuple)) else [value]
    try:
        return [float(v) for v in values]
    except (TypeError, ValueError):
        raise ConfigError(f"alpha: invalid value {value!r}") from None


# --- pipeline ------------------------------------------------------------------

def resolve_system(config: RunConfig) -> OpenSystem:
    if isinstance(config.map, str):
        return builtin_system(config.map)
    return system_from_dict(config.map)


def _default_resolution(system: OpenSystem) -> tuple:
    return (1000,) if system.dimension == 1 else (100, 100)


def _resolution_for(config: RunConfig, system: OpenSystem) -> tuple:
    res = config.resolution or _default_resolution(system)
    if len(res) == 1 and system.dimension > 1:
        res = res * system.dimension
    if len(res) != system.dimension:
        raise ConfigError(f"resolution: {len(res)} counts given for a "
                          f"{system.dimension}-dimensional map")
    return res


def _cache_meta(config: RunConfig, system: OpenSystem) -> dict:
    sampled = config.backend == "sampled"
    return {
        "map_hash": system.fingerprint(),
        "resolution": "x".join(str(r) for r in _resolution_for(config, system)),
        "backend": config.backend,
        "samples": int(config.samples) if sampled else 0,
        "seed": int(config.seed) if sampled else "none",
    }


def load_or_compute_overlap(config: RunConfig, system: Optional[OpenSystem] = None) -> OverlapData:
    """Load the overlap from ``config.cache`` when its header matches, else compute.

    A freshly computed overlap is written to the cache path (if any).  A
    corrupt cache triggers a warning and a recompute.
    """
    system = system or resolve_system(config)
    meta = {k: str(v) for k, v in _cache_meta(config, system).items()}
    cache = config.cache
    if cache is not None and Path(cache).exists():
        try:
            header = read_overlap_header(cache)
            stored = {k[5:]: v for k, v in header.items() if k.startswith("meta.")}
            if stored == meta:
                log.info("loaded overlap from cache %s", cache)
                return load_overlap(cache)
            log.info("cache %s was written for a different problem; recomputing", cache)
        except (CacheFormatError, OSError, UnicodeDecodeError) as exc:
            warnings.warn(f"ignoring corrupt overlap cache {cache}: {exc}", RuntimeWarning,
                          stacklevel=2)
    partition = build_partition(system.domain, _resolution_for(config, system))
    overlap = compute_overlap(system, partition, backend=config.backend,
                              samples_per_cell=config.samples, seed=config.seed)
    overlap = replace(overlap, meta=meta)
    if cache is not None:
        Path(cache).parent.mkdir(parents=True, exist_ok=True)
        save_overlap(cache, overlap)
    return overlap


def _solve_row(reduced: ReducedProblem, config: RunConfig, alpha: float):
    try:
        sol = solve(reduced, config.solver_config(alpha))
    except (NonConvergenceError, DualDivergenceError) as exc:
        nan = float("nan")
        iters = getattr(exc, "iterations", None) or 0
        return SweepRow(alpha, nan, nan, nan, nan, nan, int(iters), False, str(exc)), None
    row = SweepRow(alpha=float(alpha), entropy=sol.entropy, neg_entropy=-sol.entropy,
                   dual_value=sol.dual_value, survivor_mass=sol.survivor_mass,
                   residual_sup=sol.moment_residual_sup, iterations=sol.iterations,
                   converged=True)
    return row, sol


def density_filename(alpha: float) -> str:
    return f"density_alpha_{alpha:.6g}.csv"


def run(config: RunConfig) -> SweepReport:
    """Full pipeline for every requested alpha; writes outputs if ``config.out`` is set.

    Overlap and reduction are shared by all alpha values.  Alpha values that
    fail to converge are reported with ``converged = False``.
    """
    system = resolve_system(config)
    overlap = load_or_compute_overlap(config, system)
    reduced = reduce_domain(overlap)
    alphas = [float(a) for a in config.alphas]
    if config.workers > 1 and len(alphas) > 1:
        with ThreadPoolExecutor(max_workers=int(config.workers)) as pool:
            results = list(pool.map(lambda a: _solve_row(reduced, config, a), alphas))
    else:
        results = [_solve_row(reduced, config, a) for a in alphas]
    rows = [r for r, _ in results]
    solutions = {r.alpha: s for r, s in results if s is not None}
    ok = [r for r in rows if r.converged]
    argmax = max(ok, key=lambda r: r.entropy).alpha if ok else None
    report = SweepReport(rows=rows, argmax_alpha=argmax, solutions=solutions, reduced=reduced)
    if config.out is not None:
        _write_outputs(Path(config.out), config, system, overlap, reduced, report)
    return report


def _write_outputs(out: Path, config, system, overlap, reduced, report) -> None:
    out.mkdir(parents=True, exist_ok=True)
    partition = overlap.partition
    for alpha, sol in report.solutions.items():
        write_density_csv(out / density_filename(alpha), sol, partition)
        if config.refined:
            write_density_csv(out / density_filename(alpha).replace(".csv", "_refined.csv"),
                              sol, partition, refined=True)
    report.write_csv(out / "sweep.csv")
    write_mask_csv(out / "mask.csv", reduced)
    summary = {
        "map": system.name if isinstance(config.map, str) else "custom",
        "map_hash": system.fingerprint(),
        "resolution": list(partition.resolution),
        "backend": overlap.backend,
        "samples": overlap.samples,
        "seed": overlap.seed,
        **report.to_dict(),
        "solutions": {
            density_filename(a): sol.summary() for a, sol in report.solutions.items()
        },
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, allow_nan=True) + "\n",
                                      encoding="utf-8")


# --- argparse ------------------------------------------------------------------

def _add_common(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--config", type=Path, help="YAML/JSON config file; flags override it")
    ap.add_argument("--map", help="built-in map name (tent3, saddle, identity)")
    ap.add_argument("--resolution", help="cells per axis, e.g. 1000 or 100x100")
    ap.add_argument("--backend", choices=["exact", "sampled"])
    ap.add_argument("--samples", type=int, help="points per cell for the sampled backend")
    ap.add_argument("--seed", type=int, help="seed for the sampled backend")
    ap.add_argument("--cache", type=Path, help="overlap cache file (read if valid, else written)")
    ap.add_argument("-v", "--verbose", action="count", default=0)


def _add_solver(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--tol", type=float)
    ap.add_argument("--max-iter", type=int, dest="max_iter")
    ap.add_argument("--divergence-bound", type=float, dest="divergence_bound")
    ap.add_argument("--out", type=Path, help="output directory")
    ap.add_argument("--workers", type=int, help="parallel alpha workers")
    ap.add_argument("--refined", action="store_true", default=None,
                    help="also write per-subcell density files")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="accim", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="solve for one or more alpha values")
    _add_common(p_run)
    _add_solver(p_run)
    p_run.add_argument("--alpha", type=float, nargs="+")
    p_sweep = sub.add_parser("sweep", help="alpha sweep with entropy report")
    _add_common(p_sweep)
    _add_solver(p_sweep)
    p_sweep.add_argument("--alpha-range", dest="alpha_range", metavar="START:STOP:STEP")
    p_ovl = sub.add_parser("overlap", help="compute (or load) and cache the overlap matrix")
    _add_common(p_ovl)
    return ap


def _config_from_args(args) -> RunConfig:
    data = load_config(args.config) if args.config else {}
    overrides = {key: getattr(args, key, None)
                 for key in ("map", "resolution", "backend", "samples", "seed", "tol",
                             "max_iter", "divergence_bound", "out", "cache", "workers",
                             "refined")}
    if getattr(args, "alpha", None):
        overrides["alphas"] = args.alpha
    if getattr(args, "alpha_range", None):
        overrides["alphas"] = parse_alpha_range(args.alpha_range)
    if "alphas" in overrides:
        data = {k: v for k, v in data.items() if k != "alpha"}
    return config_from_mapping(data, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = _config_from_args(args)
        if args.command == "overlap":
            overlap = load_or_compute_overlap(config)
            residual = float(np.max(np.abs(overlap.row_residual()))) if overlap.n else 0.0
            print(f"n={overlap.n} nnz={overlap.C.nnz} backend={overlap.backend} "
                  f"hole_mass={overlap.c.sum():.17g} max_row_residual={residual:.3e}")
            return 0
        report = run(config)
    except ConfigError as exc:
        print(f"accim: config error: {exc}", file=sys.stderr)
        return 2
    except AccimError as exc:
        print(f"accim: error: {exc}", file=sys.stderr)
        return 1
    print(report.format_table())
    return 0 if all(r.converged for r in report.rows) else 1


if __name__ == "__main__":
    raise SystemExit(main())
