"""Posterior particle sets: history reweighting, exact enumeration, DAG bootstrap."""
from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np

from .data import Dataset, ParticleSet, effective_sample_size, normalize_log_weights
from .learner import fit_parameters, learn_structure
from .priors import PriorSpec
from .scm import as_rng, stacked_log_likelihood

__all__ = [
    "CapabilityError",
    "attach_history",
    "effective_sample_size",
    "enumerate_dags",
    "graph_log_prior",
    "exact_posterior",
    "bootstrap_posterior",
]

D_MAX = 4


class CapabilityError(RuntimeError):
    """Requested computation exceeds what the method supports."""


def attach_history(particles: ParticleSet, data: Dataset) -> ParticleSet:
    """Store ``log p(h | theta)`` per particle and softmax it into weights."""
    ll = stacked_log_likelihood(particles.weights, particles.noise_vars, data.values, data.masks)
    if len(data) == 0:
        probs = np.full(len(particles), 1.0 / len(particles))
    else:
        probs = normalize_log_weights(ll)
    return particles.with_probs(probs, ll)


def reweight(particles: ParticleSet, data: Dataset) -> ParticleSet:
    """Multiply a proposal set's weights by ``p(h | theta)``.

    ``log_hist_lik`` receives the log weight relative to uniform, so for an
    equally weighted proposal it is exactly the history log-likelihood.
    """
    ll = stacked_log_likelihood(particles.weights, particles.noise_vars, data.values, data.masks)
    log_w = ll + np.log(particles.probs * len(particles))
    return particles.with_probs(normalize_log_weights(log_w), log_w)


@lru_cache(maxsize=None)
def enumerate_dags(d: int) -> tuple[np.ndarray, ...]:
    """All labelled DAGs on ``d`` nodes as boolean adjacency matrices."""
    if d > D_MAX:
        raise CapabilityError(f"DAG enumeration supports d <= {D_MAX}, got {d}")
    pairs = [(i, j) for i in range(d) for j in range(d) if i != j]
    out = []
    for bits in itertools.product((False, True), repeat=len(pairs)):
        adj = np.zeros((d, d), dtype=bool)
        for (i, j), b in zip(pairs, bits):
            adj[i, j] = b
        # acyclic iff the adjacency is nilpotent
        m = adj.astype(int)
        p = np.eye(d, dtype=int)
        for _ in range(d):
            p = np.minimum(p @ m, 1)
        if not p.any():
            out.append(adj)
    return tuple(out)


def graph_log_prior(adj: np.ndarray, spec: PriorSpec) -> float:
    """Log-probability of a labelled DAG under random-order edge sampling.

    The graph is generated by a uniform node order followed by independent
    forward edges, so its probability is the fraction of orders it is
    consistent with times the Bernoulli edge/non-edge product.
    """
    d = adj.shape[0]
    p = spec.pair_prob
    n_edges = int(adj.sum())
    n_pairs = d * (d - 1) // 2
    consistent = 0
    for perm in itertools.permutations(range(d)):
        pos = np.empty(d, dtype=int)
        pos[list(perm)] = np.arange(d)
        ii, jj = np.nonzero(adj)
        if np.all(pos[ii] < pos[jj]):
            consistent += 1
    if consistent == 0:
        return -np.inf
    out = math.log(consistent / math.factorial(d))
    if n_edges:
        out += n_edges * math.log(p) if p > 0 else -math.inf
    if n_pairs - n_edges:
        out += (n_pairs - n_edges) * math.log1p(-p) if p < 1 else -math.inf
    return out


def exact_posterior(data: Dataset, spec: PriorSpec, M: int, rng, d_max: int = D_MAX) -> ParticleSet:
    """Enumerate every DAG, draw ``M`` prior parameter sets per graph, weight by likelihood.

    Weight of particle ``(g, m)`` is proportional to ``p(g) p(data | g, phi_m)``;
    the ``1/M`` per-graph Monte Carlo factor is common to all particles.
    """
    d = spec.d
    if d > d_max:
        raise CapabilityError(f"exact posterior limited to d <= {d_max}, got {d}")
    rng = as_rng(rng)
    dags = enumerate_dags(d)
    adjs, weights, noise, logp = [], [], [], []
    for adj in dags:
        lp = graph_log_prior(adj, spec)
        if not np.isfinite(lp):
            continue
        w, v = _draw_parameters(adj, spec, M, rng)
        adjs.append(np.broadcast_to(adj, (M, d, d)))
        weights.append(w)
        noise.append(v)
        logp.append(np.full(M, lp))
    weights = np.concatenate(weights)
    noise = np.concatenate(noise)
    ll = stacked_log_likelihood(weights, noise, data.values, data.masks)
    logw = np.concatenate(logp) + ll
    return ParticleSet(np.concatenate(adjs), weights, noise, normalize_log_weights(logw), ll)


def _draw_parameters(adj: np.ndarray, spec: PriorSpec, M: int, rng: np.random.Generator):
    # vectorized equivalent of M calls to priors.sample_parameters
    d = adj.shape[0]
    draws = spec.weight_mean + np.sqrt(spec.weight_var) * rng.standard_normal((M, d, d))
    w = np.where(adj[None], draws, 0.0)
    if spec.noise_var is None:
        v = np.maximum(rng.standard_normal((M, d)) ** 2, spec.noise_floor)
    else:
        v = np.full((M, d), float(spec.noise_var))
    return w, v


def bootstrap_posterior(data: Dataset, K: int, rng, restarts: int = 5) -> ParticleSet:
    """DAG bootstrap: learn a structure per resample, then fit its linear-Gaussian MLE.

    Records are resampled with replacement inside each intervention regime.
    Every replicate gets its own substream keyed by replicate index.
    """
    if len(data) == 0:
        raise ValueError("bootstrap posterior needs data")
    if K < 1:
        raise ValueError("K must be >= 1")
    rng = as_rng(rng)
    values, masks = data.values, data.masks
    regimes = data.regimes()
    keys = sorted(regimes)
    seeds = np.random.SeedSequence(int(rng.integers(2**63))).spawn(K)
    adjs, weights, noise = [], [], []
    for seed in seeds:
        sub = np.random.default_rng(seed)
        idx = np.concatenate([sub.choice(regimes[k], size=len(regimes[k]), replace=True) for k in keys])
        adj = learn_structure(values[idx], masks[idx], sub, restarts=restarts)
        w, v = fit_parameters(adj, values[idx], masks[idx])
        adjs.append(adj)
        weights.append(w)
        noise.append(v)
    return ParticleSet(np.stack(adjs), np.stack(weights), np.stack(noise))
