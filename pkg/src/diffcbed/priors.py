"""Random graphs and SCM parameters for environments and prior particles."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .data import ParticleSet
from .scm import Dag, Scm, as_rng


class ConfigError(ValueError):
    """Invalid user configuration."""


@dataclass(frozen=True)
class PriorSpec:
    """Generative prior over linear-Gaussian SCMs.

    Exactly one of ``edge_prob`` and ``expected_edges_per_vertex`` is set.
    ``noise_var`` fixes every noise variance; when it is ``None`` each
    variance is drawn as ``max(x**2, noise_floor)`` with ``x ~ N(0, 1)``.
    """

    d: int
    edge_prob: Optional[float] = None
    expected_edges_per_vertex: Optional[float] = None
    weight_mean: float = 0.0
    weight_var: float = 1.0
    noise_var: Optional[float] = 1.0
    noise_floor: float = 1e-2

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be positive")
        if (self.edge_prob is None) == (self.expected_edges_per_vertex is None):
            raise ConfigError("set exactly one of edge_prob / expected_edges_per_vertex")
        if self.weight_var < 0:
            raise ConfigError("weight_var must be nonnegative")
        if self.noise_var is not None and self.noise_var <= 0:
            raise ConfigError("noise_var must be positive")
        if self.noise_floor <= 0:
            raise ConfigError("noise_floor must be positive")
        p = self.pair_prob
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"derived edge probability {p} outside [0, 1]")

    @property
    def pair_prob(self) -> float:
        if self.edge_prob is not None:
            return float(self.edge_prob)
        if self.d == 1:
            return 0.0
        return float(self.expected_edges_per_vertex) / (self.d - 1)

    @classmethod
    def particles_default(cls, d: int) -> "PriorSpec":
        """Prior for particles: edge probability 0.25, sampled noise variances."""
        return cls(d, edge_prob=0.25, noise_var=None)

    @classmethod
    def environment_default(cls, d: int) -> "PriorSpec":
        """Ground-truth environments: one expected edge per vertex, unit noise."""
        return cls(d, expected_edges_per_vertex=1.0, noise_var=1.0)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "PriorSpec":
        return cls(**obj)


def sample_dag(spec: PriorSpec, rng) -> Dag:
    """Random order, then each order-respecting pair is an edge independently."""
    rng = as_rng(rng)
    order = rng.permutation(spec.d)
    n_pairs = spec.d * (spec.d - 1) // 2
    coins = rng.random(n_pairs) < spec.pair_prob
    edges = []
    k = 0
    for a in range(spec.d):
        for b in range(a + 1, spec.d):
            if coins[k]:
                edges.append((int(order[a]), int(order[b])))
            k += 1
    return Dag(spec.d, tuple(edges))


def sample_parameters(dag: Dag, spec: PriorSpec, rng) -> Scm:
    rng = as_rng(rng)
    d = dag.d
    draws = spec.weight_mean + np.sqrt(spec.weight_var) * rng.standard_normal((d, d))
    weights = np.where(dag.adjacency, draws, 0.0)
    if spec.noise_var is None:
        noise = np.maximum(rng.standard_normal(d) ** 2, spec.noise_floor)
    else:
        noise = np.full(d, float(spec.noise_var))
    return Scm(dag, weights, noise)


def sample_scm(spec: PriorSpec, rng) -> Scm:
    rng = as_rng(rng)
    return sample_parameters(sample_dag(spec, rng), spec, rng)


def sample_particles(spec: PriorSpec, L: int, rng) -> ParticleSet:
    """``L`` independent prior draws with uniform weights.

    Each particle uses its own substream keyed by particle index, so the set
    does not depend on how the draws are scheduled.
    """
    if L < 2:
        raise ValueError("L must be >= 2")
    rng = as_rng(rng)
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(L)
    scms = [sample_scm(spec, np.random.default_rng(s)) for s in seeds]
    return ParticleSet.from_scms(scms)
