"""Experimental history and weighted particle sets of SCMs."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy.special import logsumexp

from .scm import Dag, Design, Scm, SampleMatrix


class Dataset:
    """Records of ``(Design, outcome)`` pairs stored column-wise.

    Outcomes live in a single ``(n, d)`` array alongside an ``(n, d)``
    intervention mask, which is what every likelihood computation consumes.
    """

    def __init__(self, d: int, designs: Sequence[Design] = (), values=None):
        self.d = int(d)
        self.designs: list[Design] = list(designs)
        if values is None:
            values = np.zeros((0, self.d))
        self.values = np.asarray(values, dtype=float).reshape(-1, self.d)
        if len(self.designs) != self.values.shape[0]:
            raise ValueError("one design per outcome row required")
        for des, row in zip(self.designs, self.values):
            des.validate(self.d)
            if des.targets and not np.array_equal(row[list(des.targets)], np.array(des.states)):
                raise ValueError("intervened entries must equal the design states")

    @classmethod
    def from_samples(cls, samples: Iterable[SampleMatrix], d: int) -> "Dataset":
        out = cls(d)
        for sm in samples:
            out = out.extend([sm.design] * sm.n, sm.values)
        return out

    def extend(self, designs: Sequence[Design], values) -> "Dataset":
        values = np.asarray(values, dtype=float).reshape(-1, self.d)
        return Dataset(self.d, self.designs + list(designs), np.vstack([self.values, values]))

    def __len__(self) -> int:
        return len(self.designs)

    def __iter__(self) -> Iterator[tuple[Design, np.ndarray]]:
        return iter(zip(self.designs, self.values))

    @property
    def records(self) -> list[tuple[Design, np.ndarray]]:
        return list(self)

    @property
    def masks(self) -> np.ndarray:
        m = np.zeros(self.values.shape, dtype=bool)
        for r, des in enumerate(self.designs):
            m[r, list(des.targets)] = True
        return m

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.d, [self.designs[i] for i in idx], self.values[idx])

    def regimes(self) -> dict[tuple[int, ...], np.ndarray]:
        """Row indices grouped by intervention target set (observational key is ``()``)."""
        groups: dict[tuple[int, ...], list[int]] = {}
        for r, des in enumerate(self.designs):
            groups.setdefault(des.targets, []).append(r)
        return {k: np.array(v) for k, v in groups.items()}

    @property
    def observational(self) -> "Dataset":
        return self.subset([r for r, des in enumerate(self.designs) if des.is_observational])

    @property
    def interventional(self) -> "Dataset":
        return self.subset([r for r, des in enumerate(self.designs) if not des.is_observational])


class ParticleSet:
    """``L`` SCM particles with self-normalized weights.

    Parameters are held stacked (``weights`` ``(L, d, d)``, ``noise_vars``
    ``(L, d)``) so estimators can vectorize; :attr:`particles` materializes
    :class:`Scm` objects on demand.
    """

    def __init__(self, adjacency, weights, noise_vars, probs=None, log_hist_lik=None):
        self.adjacency = np.asarray(adjacency, dtype=bool)
        self.weights = np.asarray(weights, dtype=float)
        self.noise_vars = np.asarray(noise_vars, dtype=float)
        L, d = self.noise_vars.shape
        if self.weights.shape != (L, d, d) or self.adjacency.shape != (L, d, d):
            raise ValueError("inconsistent particle array shapes")
        if np.any((self.weights != 0) & ~self.adjacency):
            raise ValueError("nonzero weight on a non-edge")
        if probs is None:
            probs = np.full(L, 1.0 / L)
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (L,) or not np.all(np.isfinite(probs)) or np.any(probs < 0):
            raise ValueError("particle weights must be finite and nonnegative")
        if abs(probs.sum() - 1.0) > 1e-12:
            raise ValueError(f"particle weights sum to {probs.sum()!r}, not 1")
        self.probs = probs
        self.log_hist_lik = None if log_hist_lik is None else np.asarray(log_hist_lik, dtype=float)
        if self.log_hist_lik is not None and self.log_hist_lik.shape != (L,):
            raise ValueError("log_hist_lik must have one entry per particle")

    @classmethod
    def from_scms(cls, scms: Sequence[Scm], probs=None, log_hist_lik=None) -> "ParticleSet":
        return cls(
            np.stack([s.dag.adjacency for s in scms]),
            np.stack([s.weights for s in scms]),
            np.stack([s.noise_vars for s in scms]),
            probs,
            log_hist_lik,
        )

    def __len__(self) -> int:
        return self.noise_vars.shape[0]

    @property
    def d(self) -> int:
        return self.noise_vars.shape[1]

    def scm(self, i: int) -> Scm:
        return Scm(Dag.from_adjacency(self.adjacency[i]), self.weights[i], self.noise_vars[i])

    @property
    def particles(self) -> list[Scm]:
        return [self.scm(i) for i in range(len(self))]

    def with_probs(self, probs, log_hist_lik=None) -> "ParticleSet":
        return ParticleSet(self.adjacency, self.weights, self.noise_vars, probs, log_hist_lik)

    def to_dict(self) -> dict:
        out = {
            "particles": [self.scm(i).to_dict() for i in range(len(self))],
            "weights": self.probs.tolist(),
        }
        if self.log_hist_lik is not None:
            out["log_hist_lik"] = self.log_hist_lik.tolist()
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ParticleSet":
        scms = [Scm.from_dict(p) for p in obj["particles"]]
        return cls.from_scms(scms, obj.get("weights"), obj.get("log_hist_lik"))


def normalize_log_weights(logw) -> np.ndarray:
    logw = np.asarray(logw, dtype=float)
    p = np.exp(logw - logsumexp(logw))
    return p / p.sum()


def effective_sample_size(particles: ParticleSet | np.ndarray) -> float:
    """``1 / sum(w**2)``; uniform weights return exactly ``len(w)``."""
    w = particles.probs if isinstance(particles, ParticleSet) else np.asarray(particles, dtype=float)
    if np.all(w == w[0]):
        return float(len(w))
    return float(1.0 / np.sum(w * w))
