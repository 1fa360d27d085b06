"""Linear-Gaussian structural causal models.

Graphs, parameterized SCMs, hard interventions, ancestral sampling and the
interventional (truncated-factorization) log-likelihood.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))


class GraphError(ValueError):
    """Raised for malformed or cyclic graphs."""


def as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class Dag:
    """Directed acyclic graph over vertices ``0..d-1``.

    The topological order is computed on construction; a cycle raises
    :class:`GraphError`.
    """

    d: int
    edges: tuple[tuple[int, int], ...] = ()
    order: tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.d < 1:
            raise GraphError(f"d must be positive, got {self.d}")
        edges = tuple(sorted((int(i), int(j)) for i, j in self.edges))
        if len(set(edges)) != len(edges):
            raise GraphError("duplicate edges")
        for i, j in edges:
            if not (0 <= i < self.d and 0 <= j < self.d):
                raise GraphError(f"edge ({i}, {j}) out of range for d={self.d}")
            if i == j:
                raise GraphError(f"self-loop on vertex {i}")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "order", _kahn(self.d, edges))

    @classmethod
    def from_adjacency(cls, adj) -> "Dag":
        adj = np.asarray(adj)
        ii, jj = np.nonzero(adj)
        return cls(adj.shape[0], tuple(zip(ii.tolist(), jj.tolist())))

    @property
    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.d, self.d), dtype=bool)
        for i, j in self.edges:
            a[i, j] = True
        return a

    def parents(self, j: int) -> list[int]:
        return [i for i, k in self.edges if k == j]

    def to_dict(self) -> dict:
        return {"d": self.d, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_dict(cls, obj: dict) -> "Dag":
        return cls(int(obj["d"]), tuple(tuple(e) for e in obj["edges"]))


def _kahn(d: int, edges: Sequence[tuple[int, int]]) -> tuple[int, ...]:
    # smallest-index-first Kahn so the order is canonical
    indeg = [0] * d
    children: list[list[int]] = [[] for _ in range(d)]
    for i, j in edges:
        indeg[j] += 1
        children[i].append(j)
    ready = sorted(v for v in range(d) if indeg[v] == 0)
    order = []
    while ready:
        v = ready.pop(0)
        order.append(v)
        for c in children[v]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort()
    if len(order) != d:
        raise GraphError("graph contains a cycle")
    return tuple(order)


def topological_order(dag: Dag) -> tuple[int, ...]:
    return dag.order


@dataclass(frozen=True)
class Scm:
    """Linear-Gaussian SCM: ``X_j = sum_i weights[i, j] X_i + N(0, noise_vars[j])``."""

    dag: Dag
    weights: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        d = self.dag.d
        w = np.array(self.weights, dtype=float)
        v = np.array(self.noise_vars, dtype=float)
        if w.shape != (d, d) or v.shape != (d,):
            raise ValueError(f"parameter shapes {w.shape}, {v.shape} do not match d={d}")
        if np.any((w != 0) & ~self.dag.adjacency):
            raise ValueError("nonzero weight on a non-edge")
        if not np.all(v > 0) or not np.all(np.isfinite(v)):
            raise ValueError("noise variances must be finite and positive")
        w.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "noise_vars", v)

    @property
    def d(self) -> int:
        return self.dag.d

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "edges": [list(e) for e in self.dag.edges],
            "weights": self.weights.tolist(),
            "noise_vars": self.noise_vars.tolist(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Scm":
        dag = Dag(int(obj["d"]), tuple(tuple(e) for e in obj["edges"]))
        return cls(dag, np.array(obj["weights"], dtype=float), np.array(obj["noise_vars"], dtype=float))

    def __eq__(self, other):
        if not isinstance(other, Scm):
            return NotImplemented
        return (
            self.dag == other.dag
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.noise_vars, other.noise_vars)
        )

    def __hash__(self):
        return hash((self.dag, self.weights.tobytes(), self.noise_vars.tobytes()))


@dataclass(frozen=True)
class Design:
    """Hard intervention ``do(X_I = S^I)``; empty targets means observational."""

    targets: tuple[int, ...] = ()
    states: tuple[float, ...] = ()

    def __post_init__(self):
        targets = tuple(int(t) for t in self.targets)
        states = tuple(float(s) for s in self.states)
        if len(targets) != len(states):
            raise ValueError("one state per target required")
        if len(set(targets)) != len(targets):
            raise ValueError("duplicate targets")
        pairs = sorted(zip(targets, states))
        object.__setattr__(self, "targets", tuple(p[0] for p in pairs))
        object.__setattr__(self, "states", tuple(p[1] for p in pairs))

    @classmethod
    def observational(cls) -> "Design":
        return cls()

    @property
    def is_observational(self) -> bool:
        return not self.targets

    def validate(self, d: int) -> None:
        for t in self.targets:
            if not 0 <= t < d:
                raise ValueError(f"target {t} out of range for d={d}")

    def mask(self, d: int) -> np.ndarray:
        m = np.zeros(d, dtype=bool)
        m[list(self.targets)] = True
        return m

    def state_vector(self, d: int) -> np.ndarray:
        s = np.zeros(d)
        s[list(self.targets)] = self.states
        return s

    def to_dict(self) -> dict:
        return {"targets": list(self.targets), "states": list(self.states)}

    @classmethod
    def from_dict(cls, obj: dict) -> "Design":
        return cls(tuple(obj["targets"]), tuple(obj["states"]))


DesignBatch = tuple  # tuple[Design, ...]; kept as a plain tuple for hashing and equality


@dataclass(frozen=True)
class SampleMatrix:
    values: np.ndarray
    design: Design

    @property
    def n(self) -> int:
        return self.values.shape[0]


def sample(scm: Scm, design: Design, n: int, rng) -> SampleMatrix:
    """Ancestral sampling under ``design``; intervened columns equal their states exactly."""
    if n < 1:
        raise ValueError("n must be >= 1")
    design.validate(scm.d)
    rng = as_rng(rng)
    eps = rng.standard_normal((n, scm.d))
    fixed = dict(zip(design.targets, design.states))
    x = np.zeros((n, scm.d))
    sd = np.sqrt(scm.noise_vars)
    for j in scm.dag.order:
        if j in fixed:
            x[:, j] = fixed[j]
        else:
            x[:, j] = x @ scm.weights[:, j] + sd[j] * eps[:, j]
    return SampleMatrix(x, design)


def gaussian_logpdf(x, mean, var):
    return -0.5 * ((x - mean) ** 2 / var + np.log(var) + LOG_2PI)


def log_likelihood(scm: Scm, y, design: Design) -> float:
    """Sum of mechanism log-densities over non-intervened nodes."""
    y = np.asarray(y, dtype=float)
    mask = design.mask(scm.d)
    mean = y @ scm.weights
    ll = gaussian_logpdf(y, mean, scm.noise_vars)
    return float(np.sum(ll[~mask]))


def batch_log_likelihood(scm: Scm, outcomes: Sequence, designs: Sequence[Design]) -> float:
    if len(outcomes) != len(designs):
        raise ValueError(f"{len(outcomes)} outcomes for {len(designs)} designs")
    return float(sum(log_likelihood(scm, y, des) for y, des in zip(outcomes, designs)))


def stacked_log_likelihood(weights, noise_vars, values, masks) -> np.ndarray:
    """Dataset log-likelihood for many parameter sets at once.

    Args:
        weights: ``(P, d, d)`` edge weights.
        noise_vars: ``(P, d)`` noise variances.
        values: ``(n, d)`` outcomes.
        masks: ``(n, d)`` boolean, True where the node was intervened.

    Returns:
        ``(P,)`` array of summed log-likelihoods.
    """
    weights = np.asarray(weights, dtype=float)
    noise_vars = np.asarray(noise_vars, dtype=float)
    values = np.asarray(values, dtype=float)
    keep = ~np.asarray(masks, dtype=bool)
    if values.shape[0] == 0:
        return np.zeros(weights.shape[0])
    out = np.empty(weights.shape[0])
    # chunk over particles to bound memory at (chunk, n, d)
    chunk = max(1, int(4e6 // max(1, values.size)))
    for start in range(0, weights.shape[0], chunk):
        w = weights[start:start + chunk]
        v = noise_vars[start:start + chunk]
        mean = np.einsum("ni,pij->pnj", values, w)
        ll = gaussian_logpdf(values[None], mean, v[:, None, :])
        out[start:start + chunk] = np.sum(ll * keep[None], axis=(1, 2))
    return out


def design_batch_from_dicts(items: Iterable[dict]) -> tuple[Design, ...]:
    return tuple(Design.from_dict(o) for o in items)
