"""Posterior quality against a known ground truth: E-SHD, edge F1 and i-MMD."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import ParticleSet, effective_sample_size
from .scm import Dag, Design, Scm, SampleMatrix, as_rng, sample


def _adjacency(g) -> np.ndarray:
    return g.adjacency if isinstance(g, Dag) else np.asarray(g, dtype=bool)


def shd(g1, g2) -> int:
    """Structural Hamming distance; a reversed edge counts once."""
    a, b = _adjacency(g1), _adjacency(g2)
    if a.shape != b.shape:
        raise ValueError(f"graphs have different sizes {a.shape} and {b.shape}")
    iu = np.triu_indices(a.shape[0], k=1)
    differ = (a[iu] != b[iu]) | (a.T[iu] != b.T[iu])
    return int(differ.sum())


def shd_per_particle(particles: ParticleSet, truth: Dag) -> np.ndarray:
    t = _adjacency(truth)
    a = particles.adjacency
    iu = np.triu_indices(t.shape[0], k=1)
    fwd = a[:, iu[0], iu[1]] != t[iu]
    bwd = a[:, iu[1], iu[0]] != t.T[iu]
    return (fwd | bwd).sum(axis=1)


def expected_shd(particles: ParticleSet, truth: Dag) -> float:
    return float(np.dot(particles.probs, shd_per_particle(particles, truth)))


def f1_per_particle(particles: ParticleSet, truth: Dag) -> np.ndarray:
    t = _adjacency(truth)
    off = ~np.eye(t.shape[0], dtype=bool)
    pred = particles.adjacency[:, off]
    true = t[off]
    tp = (pred & true).sum(axis=1)
    fp = (pred & ~true).sum(axis=1)
    fn = (~pred & true).sum(axis=1)
    empty_match = (pred.sum(axis=1) == 0) & (true.sum() == 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(tp > 0, 2 * tp / (2 * tp + fp + fn), 0.0)
    return np.where(empty_match, 1.0, f1)


def edge_f1(particles: ParticleSet, truth: Dag) -> float:
    """Weighted mean F1 of directed-edge presence over ordered pairs."""
    return float(np.dot(particles.probs, f1_per_particle(particles, truth)))


def median_bandwidth(pooled: np.ndarray) -> float:
    dist = pdist(pooled)
    dist = dist[dist > 0]
    if dist.size == 0:
        warnings.warn("all pooled samples coincide; using bandwidth 1.0", RuntimeWarning, stacklevel=2)
        return 1.0
    return float(np.median(dist))


def mmd_squared(x, y) -> float:
    """Biased (V-statistic) squared MMD with a median-heuristic Gaussian kernel."""
    x = np.asarray(x.values if isinstance(x, SampleMatrix) else x, dtype=float)
    y = np.asarray(y.values if isinstance(y, SampleMatrix) else y, dtype=float)
    x = x.reshape(len(x), -1)
    y = y.reshape(len(y), -1)
    if x.shape[1] != y.shape[1] or len(x) == 0 or len(y) == 0:
        raise ValueError("samples must be nonempty with the same dimension")
    h = median_bandwidth(np.vstack([x, y]))

    def k(a, b):
        return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * h * h)).mean()

    return max(0.0, float(k(x, x) + k(y, y) - 2.0 * k(x, y)))


def evaluation_designs(d: int, rng, n_designs: int = 10, state_range=(-10.0, 10.0)) -> list[Design]:
    """Single-target designs with a uniform target and a uniform state."""
    rng = as_rng(rng)
    return [
        Design((int(rng.integers(d)),), (float(rng.uniform(*state_range)),)) for _ in range(n_designs)
    ]


def i_mmd(particles: ParticleSet, truth: Scm, n_per_design: int = 100, rng=None, n_designs: int = 10,
          state_range=(-10.0, 10.0), max_particles: Optional[int] = 30) -> tuple[float, np.ndarray]:
    """Interventional MMD between the truth and the weighted particles.

    Averages ``sqrt(mmd_squared)`` over particles (by weight) and random
    single-target designs.  Sets larger than ``max_particles`` are replaced
    by ``max_particles`` draws from the weighted set, averaged uniformly.

    Returns:
        The mean distance and the per-design means.
    """
    if n_per_design < 2:
        raise ValueError("n_per_design must be >= 2")
    rng = as_rng(rng)
    designs = evaluation_designs(truth.d, rng, n_designs, state_range)
    if max_particles is not None and len(particles) > max_particles:
        idx = rng.choice(len(particles), size=max_particles, p=particles.probs)
        weights = np.full(max_particles, 1.0 / max_particles)
    else:
        idx = np.arange(len(particles))
        weights = particles.probs
    per_design = np.empty(len(designs))
    for n, des in enumerate(designs):
        ref = sample(truth, des, n_per_design, rng).values
        dists = np.array([
            np.sqrt(mmd_squared(ref, sample(particles.scm(i), des, n_per_design, rng).values)) for i in idx
        ])
        per_design[n] = float(np.dot(weights, dists))
    return float(per_design.mean()), per_design


@dataclass
class MetricReport:
    e_shd: float
    f1: float
    i_mmd: float
    ess: float
    shd_per_particle: np.ndarray = field(repr=False, default=None)
    f1_per_particle: np.ndarray = field(repr=False, default=None)
    mmd_per_design: np.ndarray = field(repr=False, default=None)


def evaluate(particles: ParticleSet, truth: Scm, rng=None, n_per_design: int = 100, n_designs: int = 10,
             state_range=(-10.0, 10.0), max_particles: Optional[int] = 30) -> MetricReport:
    per_shd = shd_per_particle(particles, truth.dag)
    per_f1 = f1_per_particle(particles, truth.dag)
    mmd, per_design = i_mmd(particles, truth, n_per_design, rng, n_designs, state_range, max_particles)
    return MetricReport(
        float(np.dot(particles.probs, per_shd)),
        float(np.dot(particles.probs, per_f1)),
        mmd,
        effective_sample_size(particles),
        per_shd,
        per_f1,
        per_design,
    )
