"""Command-line interface.

Every subcommand reads one JSON config, writes the config with all defaults
filled in (``config.json``) to the output directory, then computes.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or
configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .acquisition import (
    METRICS_HEADER,
    Environment,
    RunConfig,
    execute,
    Beliefs,
    design_with_policy,
    run_loop,
    stream,
)
from .data import Dataset, ParticleSet
from .estimators import eig_grid, write_grid_csv
from .metrics import evaluate
from .posterior import D_MAX, CapabilityError, exact_posterior
from .priors import ConfigError, PriorSpec
from .scm import Design, Scm

log = logging.getLogger("diffcbed")

DEFAULT_OUT = "diffcbed_out"
SECTIONS = ("sample", "grid", "evaluate")

SAMPLE_DEFAULTS = {"n_obs": 100, "interventions": []}
GRID_DEFAULTS = {
    "B": 2,
    "n_obs": 0,
    "state_low": -20.0,
    "state_high": 20.0,
    "state_num": 41,
    "target_pairs": None,
    "n_outer": 30,
    "L": 30,
    "particles_per_graph": 100,
    "particles_path": None,
}
EVALUATE_DEFAULTS = {"particles_path": None, "truth_path": None}


class UsageError(Exception):
    """Bad command line or configuration; exit status 2."""


def load_config(path: str) -> dict:
    try:
        with open(path) as fh:
            obj = json.load(fh)
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("config must be a JSON object")
    return obj


def resolve(raw: dict, seed: Optional[int] = None) -> dict:
    """Split a raw config into a validated run config and per-command sections."""
    raw = dict(raw)
    sections = {name: raw.pop(name, {}) or {} for name in SECTIONS}
    if seed is not None:
        raw["seed"] = seed
    run = RunConfig.from_dict(raw)
    out = {"run": run}
    for name, defaults in (("sample", SAMPLE_DEFAULTS), ("grid", GRID_DEFAULTS), ("evaluate", EVALUATE_DEFAULTS)):
        unknown = set(sections[name]) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
        out[name] = {**defaults, **sections[name]}
    return out


def echo(out_dir: Path, cfg: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"run": cfg["run"].to_dict(), **{k: cfg[k] for k in SECTIONS}}
    (out_dir / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_samples_csv(path: Path, data: Dataset) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["targets", "states"] + [f"x{j}" for j in range(data.d)])
        for des, row in data:
            writer.writerow([" ".join(map(str, des.targets)), " ".join(repr(s) for s in des.states)]
                            + [repr(float(x)) for x in row])


def cmd_sample(cfg: dict, out: Path) -> int:
    run: RunConfig = cfg["run"]
    env = Environment.from_config(run)
    sec = cfg["sample"]
    data = Dataset(run.d)
    if sec["n_obs"]:
        data = data.extend(*_parts(execute(env, [Design()], int(sec["n_obs"]))))
    for item in sec["interventions"]:
        des = Design(tuple(item["targets"]), tuple(item["states"]))
        data = data.extend(*_parts(execute(env, [des], int(item.get("n", 1)))))
    (out / "scm.json").write_text(json.dumps(env.truth_for_metrics().to_dict(), indent=2) + "\n")
    write_samples_csv(out / "samples.csv", data)
    return 0


def _parts(ds: Dataset):
    return ds.designs, ds.values


def _grid_posterior(run: RunConfig, sec: dict) -> ParticleSet:
    if sec["particles_path"]:
        return ParticleSet.from_dict(json.loads(Path(sec["particles_path"]).read_text()))
    if run.d > D_MAX:
        raise CapabilityError(f"exact posterior limited to d <= {D_MAX}, got d={run.d}")
    env = Environment.from_config(run)
    data = Dataset(run.d)
    if sec["n_obs"]:
        data = execute(env, [Design()], int(sec["n_obs"]))
    return exact_posterior(data, PriorSpec.from_dict(run.particle_prior), int(sec["particles_per_graph"]),
                           stream(run.seed, 20))


def cmd_eig_grid(cfg: dict, out: Path) -> int:
    run: RunConfig = cfg["run"]
    sec = cfg["grid"]
    posterior = _grid_posterior(run, sec)
    B = int(sec["B"])
    pairs = sec["target_pairs"]
    if pairs is None:
        pairs = [tuple((i,) for i in combo) for combo in np.ndindex(*(posterior.d,) * B)]
    grid = np.linspace(float(sec["state_low"]), float(sec["state_high"]), int(sec["state_num"]))
    points = eig_grid(posterior, grid, pairs, int(sec["n_outer"]), int(sec["L"]), stream(run.seed, 21))
    write_grid_csv(out / "eig_grid.csv", points)
    return 0


def cmd_design(cfg: dict, out: Path) -> int:
    run: RunConfig = cfg["run"]
    env = Environment.from_config(run)
    data = execute(env, [Design()], run.N) if run.N else Dataset(run.d)
    beliefs = Beliefs(run)
    trace: list[dict] = []
    batch = design_with_policy(run, beliefs.design(data), 1, trace)
    with open(out / "trace.jsonl", "w") as fh:
        fh.writelines(json.dumps(r) + "\n" for r in trace)
    (out / "designs.json").write_text(json.dumps([d.to_dict() for d in batch], indent=2) + "\n")
    return 0


def _run_seed(args: tuple) -> tuple[int, bool]:
    raw, seed, seed_dir = args
    torch.set_num_threads(1)
    result = run_loop(resolve(raw, seed)["run"], out_dir=seed_dir)
    return seed, result.ok


def aggregate(rows_by_seed: dict[int, list[dict]]) -> list[dict]:
    """Per-batch mean and 1.96 * standard-error half-width across seeds."""
    batches = sorted({r["batch_index"] for rows in rows_by_seed.values() for r in rows})
    out = []
    for b in batches:
        row = {"batch_index": b}
        present = [r for rows in rows_by_seed.values() for r in rows if r["batch_index"] == b]
        for key in ("e_shd", "f1", "i_mmd", "ess"):
            vals = np.array([r[key] for r in present])
            vals = vals[np.isfinite(vals)]
            n = len(vals)
            row[f"{key}_mean"] = float(vals.mean()) if n else math.nan
            row[f"{key}_ci95"] = float(1.96 * vals.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
        row["n_seeds"] = len(present)
        out.append(row)
    return out


AGGREGATE_HEADER = ("batch_index", "e_shd_mean", "e_shd_ci95", "f1_mean", "f1_ci95", "i_mmd_mean", "i_mmd_ci95",
                    "ess_mean", "ess_ci95", "n_seeds")


def read_metrics(path: Path) -> list[dict]:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("batch_index", "seed") else float(v)) for k, v in r.items()} for r in rows]


def cmd_loop(cfg: dict, out: Path, raw: dict, seeds: list[int], jobs: int) -> int:
    tasks = [(raw, s, str(out / f"seed_{s}")) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_seed, tasks))
    else:
        results = [_run_seed(t) for t in tasks]
    failed = [s for s, ok in results if not ok]
    rows = {s: read_metrics(out / f"seed_{s}" / "metrics.csv") for s in seeds}
    with open(out / "aggregate.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_HEADER)
        for r in aggregate(rows):
            writer.writerow([r[k] if k in ("batch_index", "n_seeds") else repr(r[k]) for k in AGGREGATE_HEADER])
    for s in failed:
        print(f"seed {s} failed; see {out / f'seed_{s}' / 'failure.json'}", file=sys.stderr)
    return 1 if failed else 0


def cmd_evaluate(cfg: dict, out: Path) -> int:
    run: RunConfig = cfg["run"]
    sec = cfg["evaluate"]
    if not sec["particles_path"] or not sec["truth_path"]:
        raise ConfigError("evaluate needs evaluate.particles_path and evaluate.truth_path")
    particles = ParticleSet.from_dict(json.loads(Path(sec["particles_path"]).read_text()))
    truth = Scm.from_dict(json.loads(Path(sec["truth_path"]).read_text()))
    if particles.d != truth.d:
        raise ConfigError(f"particles have d={particles.d} but the truth SCM has d={truth.d}")
    report = evaluate(particles, truth, stream(run.seed, 22), run.metric_samples, run.metric_designs,
                      run.design_range, run.metric_particles)
    with open(out / "metrics.csv", "w") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")
        fh.write(",".join([ "0", repr(report.e_shd), repr(report.f1), repr(report.i_mmd), repr(report.ess),
                            str(run.seed)]) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffcbed", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=["sample", "eig-grid", "design", "loop", "evaluate"])
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", help=f"output directory (default: $DIFFCBED_OUT or ./{DEFAULT_OUT})")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--seeds", help="comma-separated seed list for loop sweeps")
    parser.add_argument("--jobs", type=int, default=1, help="parallel seed replicas for loop")
    parser.add_argument("--strategy", choices=["policy", "random_fixed", "random_random"],
                        help="override the config strategy")
    parser.add_argument("--verbose", "-v", action="store_true")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    out = Path(args.out or os.environ.get("DIFFCBED_OUT") or DEFAULT_OUT)
    try:
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        raw = load_config(args.config)
        if args.strategy:
            raw["strategy"] = args.strategy
        seeds = None
        if args.seeds:
            try:
                seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            except ValueError as exc:
                raise UsageError(f"bad --seeds value {args.seeds!r}") from exc
            if not seeds:
                raise UsageError("--seeds is empty")
        cfg = resolve(raw, args.seed)
        echo(out, cfg)
        if args.command == "sample":
            return cmd_sample(cfg, out)
        if args.command == "eig-grid":
            return cmd_eig_grid(cfg, out)
        if args.command == "design":
            return cmd_design(cfg, out)
        if args.command == "loop":
            return cmd_loop(cfg, out, raw, seeds or [cfg["run"].seed], args.jobs)
        return cmd_evaluate(cfg, out)
    except (UsageError, ConfigError, CapabilityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
