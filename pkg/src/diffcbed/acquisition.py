"""Batch acquisition loop: design, execute, refit, evaluate, repeat.

A run starts from ``N`` observational records, then for each of ``T``
batches designs ``B`` interventions (optimized policy or a random baseline),
executes them against the environment, refits the posterior and logs
metrics.  The ground-truth SCM is only reachable through
:meth:`Environment.intervene` and :meth:`Environment.truth_for_metrics`.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Dataset, ParticleSet, effective_sample_size
from .estimators import ImportanceWeightedNMC, NestedMonteCarlo
from .metrics import evaluate
from .optim import OptimizerConfig, optimize_policy
from .policy import (
    FixedState,
    TemperatureSchedule,
    UniformState,
    init_policy,
    random_baseline,
    sample_relaxed,
    to_design_batch,
)
from .posterior import attach_history, bootstrap_posterior, exact_posterior, reweight
from .priors import ConfigError, PriorSpec, sample_particles, sample_scm
from .scm import Design, Scm, sample

log = logging.getLogger(__name__)

ESTIMATORS = ("nmc", "iwnmc")
POSTERIORS = ("exact", "bootstrap", "none")
STRATEGIES = ("policy", "random_fixed", "random_random")
METRICS_HEADER = ("batch_index", "e_shd", "f1", "i_mmd", "ess", "seed")

# stream tags for per-purpose random substreams
_ENV, _INIT, _DESIGN, _POSTERIOR, _EVAL, _METRICS, _PRIOR = range(7)


@dataclass
class RunConfig:
    """Everything needed to reproduce one acquisition run.

    ``posterior`` is the belief the strategy designs against; ``none`` is
    only valid with ``estimator = "iwnmc"``, which then uses ``L`` prior
    particles reweighted by the history.  ``eval_posterior`` is what metrics
    are computed on (defaults to ``posterior``, or ``bootstrap`` when that is
    ``none``).
    """

    d: int = 5
    B: int = 5
    T: int = 10
    N: int = 60
    n_per_batch_execution: int = 1
    estimator: str = "nmc"
    posterior: str = "bootstrap"
    eval_posterior: Optional[str] = None
    mode: str = "single"
    k: Optional[int] = None
    strategy: str = "policy"
    fixed_state: Optional[float] = None
    L: int = 30
    n_outer: int = 30
    C: int = 100
    O: int = 16
    learning_rate: float = 0.1
    temperature_start: float = 5.0
    temperature_end: float = 0.5
    design_range: tuple[float, float] = (-10.0, 10.0)
    bootstraps: int = 30
    restarts: int = 5
    particles_per_graph: int = 100
    ess_floor: float = 2.0
    outer_weight_tol: float = 1e-12
    particle_prior: Optional[dict] = None
    environment_prior: Optional[dict] = None
    metric_samples: int = 100
    metric_designs: int = 10
    metric_particles: int = 30
    seed: int = 0
    scm_seed: Optional[int] = None

    def __post_init__(self):
        self.design_range = tuple(float(x) for x in self.design_range)
        if self.particle_prior is None:
            self.particle_prior = PriorSpec.particles_default(self.d).to_dict()
        if self.environment_prior is None:
            self.environment_prior = PriorSpec.environment_default(self.d).to_dict()
        if self.eval_posterior is None:
            self.eval_posterior = "bootstrap" if self.posterior == "none" else self.posterior
        self.validate()

    def validate(self) -> None:
        if self.estimator not in ESTIMATORS:
            raise ConfigError(f"estimator must be one of {ESTIMATORS}")
        if self.posterior not in POSTERIORS:
            raise ConfigError(f"posterior must be one of {POSTERIORS}")
        if self.eval_posterior not in ("exact", "bootstrap"):
            raise ConfigError("eval_posterior must be exact or bootstrap")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.estimator == "nmc" and self.posterior == "none":
            raise ConfigError("the nmc estimator needs a posterior (exact or bootstrap)")
        if self.d < 1 or self.B < 1 or self.T < 0 or self.N < 0 or self.n_per_batch_execution < 1:
            raise ConfigError("d, B, n_per_batch_execution must be >= 1 and T, N >= 0")
        if self.mode == "multi_constrained" and (self.k is None or not 1 <= self.k <= self.d):
            raise ConfigError("multi_constrained mode needs 1 <= k <= d")
        if self.L < 1 or self.n_outer < 1 or self.C < 1 or self.O < 1:
            raise ConfigError("L, n_outer, C and O must be >= 1")
        if self.estimator == "iwnmc" and self.L < 2 and self.posterior == "none":
            raise ConfigError("iwnmc needs L >= 2 prior particles")
        if "bootstrap" in (self.posterior, self.eval_posterior) and self.N == 0:
            raise ConfigError("bootstrap posterior needs initial observational data (N >= 1)")
        lo, hi = self.design_range
        if not lo < hi:
            raise ConfigError("design_range must be increasing")
        for prior in (self.particle_prior, self.environment_prior):
            spec = PriorSpec.from_dict(prior)
            if spec.d != self.d:
                raise ConfigError("prior dimension does not match d")

    @classmethod
    def preset(cls, name: str, **overrides) -> "RunConfig":
        """Standard settings for single/multi-target NMC and IWNMC runs."""
        presets = {
            "single_nmc": dict(B=5, T=10, N=60, estimator="nmc", posterior="bootstrap", mode="single",
                               L=30, n_outer=30, bootstraps=30, learning_rate=0.1),
            "multi_nmc": dict(B=2, T=10, N=60, estimator="nmc", posterior="bootstrap",
                              mode="multi_unconstrained", L=30, n_outer=30, bootstraps=30, learning_rate=0.1),
            "multi_iwnmc_prior": dict(B=2, T=5, N=2, estimator="iwnmc", posterior="none",
                                      mode="multi_unconstrained", L=1000, n_outer=1000, learning_rate=0.01,
                                      temperature_start=0.1, temperature_end=0.1),
            "multi_iwnmc_proposal": dict(B=2, T=1, N=800, estimator="iwnmc", posterior="bootstrap",
                                         mode="multi_unconstrained", L=60, n_outer=60, bootstraps=60,
                                         learning_rate=0.1),
        }
        if name not in presets:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(presets)}")
        return cls(**{**presets[name], **overrides})

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["design_range"] = list(self.design_range)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - known - {"preset"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        obj = dict(obj)
        name = obj.pop("preset", None)
        try:
            if name is not None:
                return cls.preset(name, **obj)
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def stream(seed: int, tag: int, index: int = 0) -> np.random.Generator:
    """Independent substream for ``(seed, purpose, index)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(tag, index)))


class Environment:
    """Ground-truth SCM behind an intervention interface."""

    def __init__(self, truth: Scm, rng):
        self._truth = truth
        self._rng = rng
        self.d = truth.d

    @classmethod
    def from_config(cls, config: RunConfig) -> "Environment":
        scm_seed = config.seed if config.scm_seed is None else config.scm_seed
        truth = sample_scm(PriorSpec.from_dict(config.environment_prior), stream(scm_seed, _ENV, 0))
        return cls(truth, stream(config.seed, _ENV, 1))

    def intervene(self, design: Design, n: int) -> np.ndarray:
        return sample(self._truth, design, n, self._rng).values

    def truth_for_metrics(self) -> Scm:
        return self._truth


def execute(env: Environment, batch, n: int) -> Dataset:
    """Run every design ``n`` times; returns the new records in batch order."""
    designs, values = [], []
    for des in batch:
        des.validate(env.d)
        values.append(env.intervene(des, n))
        designs.extend([des] * n)
    return Dataset(env.d, designs, np.vstack(values) if values else None)


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[dict] = field(default_factory=list)
    designs: list[tuple[Design, ...]] = field(default_factory=list)
    trace: list[dict] = field(default_factory=list)
    data: Optional[Dataset] = None
    particles: Optional[ParticleSet] = None
    failure: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.failure is None


class _RunWriter:
    """Per-batch atomic appends to a run directory."""

    def __init__(self, out_dir, config: RunConfig):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        _write_atomic(self.dir / "config.json", json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
        for name in ("trace.jsonl", "designs.jsonl"):
            _write_atomic(self.dir / name, "")
        _write_atomic(self.dir / "metrics.csv", ",".join(METRICS_HEADER) + "\n")

    def append(self, name: str, text: str) -> None:
        with open(self.dir / name, "a") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())

    def batch(self, metrics_row: dict, designs=None, trace=None, batch_index: int = 0) -> None:
        if trace:
            self.append("trace.jsonl", "".join(json.dumps({"batch": batch_index, **r}) + "\n" for r in trace))
        if designs is not None:
            rec = {"batch": batch_index, "designs": [d.to_dict() for d in designs]}
            self.append("designs.jsonl", json.dumps(rec) + "\n")
        self.append("metrics.csv", format_metrics_row(metrics_row))

    def particles(self, particles: ParticleSet) -> None:
        _write_atomic(self.dir / "particles_final.json", json.dumps(particles.to_dict()) + "\n")

    def failure(self, batch_index: int, message: str) -> None:
        _write_atomic(self.dir / "failure.json", json.dumps({"batch": batch_index, "error": message}) + "\n")


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(text)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def format_metrics_row(row: dict) -> str:
    return ",".join(_fmt(row[k]) for k in METRICS_HEADER) + "\n"


class Beliefs:
    """Posterior particle sets per data size, cached so each is fitted once.

    With ``estimator = "iwnmc"`` and a fitted posterior, that posterior is a
    fixed proposal: it is fitted once on the ``N`` initial records and later
    records only reweight it.
    """

    def __init__(self, config: RunConfig):
        self.config = config
        self.cache: dict[tuple[str, int, int], ParticleSet] = {}
        self.prior = None
        self.proposal = config.estimator == "iwnmc" and config.posterior != "none"
        if config.posterior == "none":
            self.prior = sample_particles(PriorSpec.from_dict(config.particle_prior), config.L,
                                          stream(config.seed, _PRIOR))

    def fit(self, kind: str, data: Dataset, tag: int) -> ParticleSet:
        key = (kind, len(data), tag)
        if key not in self.cache:
            cfg = self.config
            rng = stream(cfg.seed, tag, len(data))
            if kind == "none":
                ps = attach_history(self.prior, data)
            elif kind == "exact":
                ps = exact_posterior(data, PriorSpec.from_dict(cfg.particle_prior), cfg.particles_per_graph, rng)
            else:
                ps = bootstrap_posterior(data, cfg.bootstraps, rng, restarts=cfg.restarts)
            self.cache[key] = ps
        return self.cache[key]

    def get(self, kind: str, data: Dataset, tag: int) -> ParticleSet:
        if self.proposal and kind == self.config.posterior:
            initial = data.subset(np.arange(min(self.config.N, len(data))))
            later = data.subset(np.arange(len(initial), len(data)))
            return reweight(self.fit(kind, initial, _POSTERIOR), later)
        return self.fit(kind, data, tag)

    def design(self, data: Dataset) -> ParticleSet:
        return self.get(self.config.posterior, data, _POSTERIOR)

    def evaluation(self, data: Dataset) -> ParticleSet:
        kind = self.config.eval_posterior
        # reuse the design posterior when both are the same kind of fit
        tag = _POSTERIOR if kind == self.config.posterior else _EVAL
        return self.get(kind, data, tag)


def design_with_policy(config: RunConfig, particles: ParticleSet, t: int, trace: list):
    cfg = config
    rng = stream(cfg.seed, _DESIGN, t)
    if cfg.estimator == "nmc":
        def factory(r):
            return NestedMonteCarlo(particles, cfg.B, cfg.n_outer, cfg.L, r)
    else:
        def factory(r):
            return ImportanceWeightedNMC(particles, cfg.B, r, cfg.ess_floor, cfg.outer_weight_tol)
    params = init_policy(cfg.B, cfg.d, cfg.mode, rng, cfg.design_range, cfg.temperature_start, cfg.k)
    opt = OptimizerConfig(cfg.learning_rate, TemperatureSchedule(cfg.temperature_start, cfg.temperature_end),
                          cfg.design_range)
    params = optimize_policy(factory, params, cfg.C, cfg.O, opt, rng, trace)
    return to_design_batch(sample_relaxed(params, rng))


def design_with_baseline(config: RunConfig, t: int):
    cfg = config
    rng = stream(cfg.seed, _DESIGN, t)
    if cfg.strategy == "random_fixed":
        value = cfg.fixed_state
        if value is None:
            value = 0.0 if cfg.mode == "single" else 5.0
        rule = FixedState(value)
    else:
        rule = UniformState(*cfg.design_range)
    return random_baseline(cfg.mode, rule, cfg.B, cfg.d, rng, cfg.k)


def run_loop(config: RunConfig, env: Optional[Environment] = None, out_dir=None) -> RunResult:
    """Run the full acquisition loop with ``config.strategy``.

    Metric row ``0`` describes the initial observational data; rows
    ``1..T`` follow each executed batch.  A failing batch writes a row of
    NaNs plus ``failure.json`` and ends the run.
    """
    cfg = config
    env = env or Environment.from_config(cfg)
    writer = _RunWriter(out_dir, cfg) if out_dir is not None else None
    result = RunResult(cfg)
    beliefs = Beliefs(cfg)
    data = Dataset(cfg.d)
    t = 0
    try:
        if cfg.N:
            data = execute(env, [Design()], cfg.N)
        _record(result, writer, beliefs, env, data, 0)
        for t in range(1, cfg.T + 1):
            trace: list[dict] = []
            if cfg.strategy == "policy":
                batch = design_with_policy(cfg, beliefs.design(data), t, trace)
            else:
                batch = design_with_baseline(cfg, t)
            data = data.extend(*_records(execute(env, batch, cfg.n_per_batch_execution)))
            result.designs.append(batch)
            result.trace.extend({"batch": t, **r} for r in trace)
            _record(result, writer, beliefs, env, data, t, batch, trace)
    except Exception as exc:  # noqa: BLE001 - any failure ends the run with a recorded row
        log.exception("batch %d failed", t)
        result.failure = f"{type(exc).__name__}: {exc}"
        row = {"batch_index": t, "e_shd": math.nan, "f1": math.nan, "i_mmd": math.nan, "ess": math.nan,
               "seed": cfg.seed}
        result.metrics.append(row)
        if writer:
            writer.append("metrics.csv", format_metrics_row(row))
            writer.failure(t, result.failure)
    result.data = data
    return result


def run_baseline(config: RunConfig, env: Optional[Environment] = None, out_dir=None,
                 baseline: str = "random_random") -> RunResult:
    if baseline not in ("random_fixed", "random_random"):
        raise ConfigError(f"unknown baseline {baseline!r}")
    return run_loop(dataclasses.replace(config, strategy=baseline), env, out_dir)


def _records(ds: Dataset):
    return ds.designs, ds.values


def _record(result: RunResult, writer, beliefs: Beliefs, env: Environment, data: Dataset, t: int,
            batch=None, trace=None) -> None:
    cfg = beliefs.config
    particles = beliefs.evaluation(data)
    design_side = beliefs.design(data) if cfg.posterior == "none" else particles
    report = evaluate(particles, env.truth_for_metrics(), stream(cfg.seed, _METRICS, t), cfg.metric_samples,
                      cfg.metric_designs, cfg.design_range, cfg.metric_particles)
    row = {"batch_index": t, "e_shd": report.e_shd, "f1": report.f1, "i_mmd": report.i_mmd,
           "ess": effective_sample_size(design_side), "seed": cfg.seed}
    result.metrics.append(row)
    result.particles = particles
    if writer:
        writer.batch(row, batch, trace, t)
        writer.particles(particles)
