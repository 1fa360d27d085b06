"""Nested Monte Carlo estimators of expected information gain.

Both estimators compare the likelihood of simulated outcomes under the
particle that generated them against a contrastive set of particles.  The
contrastive set is stored as multiplicity counts over the *distinct*
particles, so repeated draws of one particle cost a single likelihood
evaluation and identical particles cancel exactly.

Outcomes are simulated under the hard design.  Inside the likelihood, node
``j``'s factor is weighted by ``1 - t_j`` and its mean is
``t_j s_j + (1 - t_j) (y W)_j``, where ``t`` is the straight-through target
matrix; at hard targets this is exactly the interventional likelihood, and
the soft path gives nonzero logit gradients.
"""
from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .data import ParticleSet, effective_sample_size
from .optim import EigEstimate, evaluate_with_gradients
from .policy import RelaxedDesignSample
from .scm import LOG_2PI, Design, as_rng

log = logging.getLogger(__name__)

# above this many residual entries (outer x particles x B x d) switch to the quadratic form
DIRECT_LIMIT = 2_000_000


def unique_particles(particles: ParticleSet):
    """Collapse bitwise-identical particles.

    Returns:
        ``(weights, noise_vars, inverse, probs)`` where ``inverse[i]`` is the
        distinct index of particle ``i`` and ``probs`` sums the particle
        weights per distinct particle.
    """
    L, d = particles.noise_vars.shape
    keys = np.concatenate([particles.weights.reshape(L, -1), particles.noise_vars], axis=1)
    _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    probs = np.bincount(inverse, weights=particles.probs, minlength=len(first))
    return particles.weights[first], particles.noise_vars[first], inverse, probs / probs.sum()


def simulate_outcomes(weights, noise_sd, eps, targets: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
    """Outcomes ``(N, B, d)`` of ``N`` particles under a (straight-through) design.

    Solves ``y = t s + (1 - t) (y W + sd * eps)`` by ``d`` substitution
    sweeps, which is exact because ``W`` is nilpotent for a DAG.
    """
    w = torch.as_tensor(weights)
    noise = torch.as_tensor(noise_sd)[:, None, :] * torch.as_tensor(eps)
    fixed = targets * states
    free = 1.0 - targets
    y = torch.zeros_like(noise) + fixed
    for _ in range(w.shape[-1]):
        y = fixed + free * (torch.einsum("nbi,nij->nbj", y, w) + noise)
    return y


def loglik_matrix(y: torch.Tensor, weights, noise_vars, targets: torch.Tensor, states: torch.Tensor,
                  method: str = "auto") -> torch.Tensor:
    """Soft-masked batch log-likelihood of each outcome under each particle, ``(N, P)``."""
    w = torch.as_tensor(weights)
    v = torch.as_tensor(noise_vars)
    N, B, d = y.shape
    P = w.shape[0]
    free = 1.0 - targets
    fixed = targets * states
    const = -0.5 * torch.einsum("bj,pj->p", free, torch.log(v) + LOG_2PI)
    if method == "auto":
        method = "direct" if N * P * B * d <= DIRECT_LIMIT else "quadratic"
    if method == "direct":
        mean = fixed + free * torch.einsum("nbi,pij->npbj", y, w)
        r = y[:, None] - mean
        return -0.5 * torch.einsum("npbj,pj,bj->np", r * r, 1.0 / v, free) + const
    if method != "quadratic":
        raise ValueError(f"unknown method {method!r}")
    # residual_j = z . u_j with z = (y, 1), u_j = (e_j - (1 - t_j) W[:, j], -t_j s_j)
    eye = torch.eye(d, dtype=y.dtype)
    u = eye[None, None] - free[None, :, None, :] * w[:, None]
    u = torch.cat([u, -fixed[None, :, None, :].expand(P, B, 1, d)], dim=2)
    q = torch.einsum("pbij,pbkj,pbj->pbik", u, u, free[None] / v[:, None, :])
    z = torch.cat([y, torch.ones(N, B, 1, dtype=y.dtype)], dim=2)
    zz = torch.einsum("nbi,nbk->nbik", z, z).reshape(N, -1)
    return -0.5 * zz @ q.reshape(P, -1).T + const


def log_shift(counts, offsets) -> torch.Tensor:
    """``log c + o`` per (outcome, contrastive particle); ``-inf`` where ``c = 0``."""
    with np.errstate(divide="ignore"):
        return torch.as_tensor(np.log(np.asarray(counts, dtype=float)) + np.asarray(offsets, dtype=float)[None])


def contrast_terms(ll: torch.Tensor, self_idx, shift: torch.Tensor, log_norm: float) -> torch.Tensor:
    """Per-outcome ``log p(y|theta_0) - log(sum_l c_l p(y|theta_l) e^{o_l} / norm)``.

    Computed as a log-sum-exp of likelihood *differences* plus ``shift``
    (see :func:`log_shift`), so a contrastive particle identical to the
    generating one contributes exactly ``log c``.
    """
    n = ll.shape[0]
    ll_self = ll[torch.arange(n), torch.as_tensor(self_idx)]
    return log_norm - torch.logsumexp(ll - ll_self[:, None] + shift, dim=1)


class NestedMonteCarlo:
    """NMC objective with outer and contrastive draws from a weighted particle set.

    Outer particles, outcome noise and contrastive counts are drawn once at
    construction and reused for every call (common random numbers).
    Contrastive particles are redrawn independently for each outer draw.

    Args:
        posterior: weighted particle set.
        B: batch size.
        n_outer: number of outer draws.
        L: contrastive draws per outer draw.
        rng: random stream.
        include_outer: also count the generating particle in the
            contrastive set (divisor ``L + 1``); bounds each term by
            ``log(L + 1)``.
        method: likelihood path, ``auto``, ``direct`` or ``quadratic``.
    """

    def __init__(self, posterior: ParticleSet, B: int, n_outer: int = 30, L: int = 30, rng=None,
                 include_outer: bool = False, method: str = "auto"):
        if n_outer < 1 or L < 1:
            raise ValueError("n_outer and L must be >= 1")
        rng = as_rng(rng)
        w, v, _, probs = unique_particles(posterior)
        U, d = v.shape
        outer = rng.choice(U, size=n_outer, p=probs)
        self.eps = rng.standard_normal((n_outer, B, d))
        counts = rng.multinomial(L, probs, size=n_outer)
        norm = L
        if include_outer:
            counts[np.arange(n_outer), outer] += 1
            norm = L + 1
        cols = np.union1d(outer, np.flatnonzero(counts.sum(axis=0)))
        remap = np.full(U, -1)
        remap[cols] = np.arange(len(cols))
        self.weights, self.noise_vars = w[cols], v[cols]
        self.outer_weights, self.outer_sd = w[outer], np.sqrt(v[outer])
        self.self_idx = remap[outer]
        self.counts = counts[:, cols]
        self.offsets = np.zeros(len(cols))
        self.shift = log_shift(self.counts, self.offsets)
        self.log_norm = math.log(norm)
        self.method = method
        self.diagnostics = {"ess": effective_sample_size(posterior), "n_outer": n_outer, "L": L}

    def terms(self, targets: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        y = simulate_outcomes(self.outer_weights, self.outer_sd, self.eps, targets, states)
        ll = loglik_matrix(y, self.weights, self.noise_vars, targets, states, self.method)
        return contrast_terms(ll, self.self_idx, self.shift, self.log_norm)

    def __call__(self, targets: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        return torch.mean(self.terms(targets, states))


class ImportanceWeightedNMC:
    """Leave-one-out NMC over prior (or proposal) particles with history weights.

    Every particle ``m`` generates one outcome; it is contrasted against all
    other particles weighted by ``p(h | theta_l)``, and the per-particle terms
    are averaged with the self-normalized weights ``omega_m`` of the set.

    Args:
        particles: particle set; ``log_hist_lik`` of ``None`` means an empty
            history.
        B: batch size.
        rng: random stream.
        ess_floor: effective sample size below which a warning is attached.
        outer_tol: outer terms with ``omega_m <= outer_tol * max(omega)``
            are skipped; their total contribution is at most
            ``L * outer_tol`` times the largest term.  ``0`` is exact.
        method: likelihood path.
    """

    def __init__(self, particles: ParticleSet, B: int, rng=None, ess_floor: float = 2.0,
                 outer_tol: float = 0.0, method: str = "auto"):
        L = len(particles)
        if L < 2:
            raise ValueError("importance-weighted NMC needs L >= 2")
        rng = as_rng(rng)
        w, v, inverse, _ = unique_particles(particles)
        U, d = v.shape
        self.eps = rng.standard_normal((L, B, d))
        hist = np.zeros(L) if particles.log_hist_lik is None else particles.log_hist_lik
        offsets = np.empty(U)
        offsets[inverse] = hist
        mult = np.bincount(inverse, minlength=U)
        counts = np.broadcast_to(mult, (L, U)).copy()
        counts[np.arange(L), inverse] -= 1
        keep = np.flatnonzero(particles.probs > outer_tol * particles.probs.max())
        self.omega = particles.probs[keep]
        self.outer_weights = particles.weights[keep]
        self.outer_sd = np.sqrt(particles.noise_vars[keep])
        self.eps = self.eps[keep]
        self.self_idx = inverse[keep]
        self.counts = counts[keep]
        self.weights, self.noise_vars, self.offsets = w, v, offsets
        self.shift = log_shift(self.counts, offsets)
        self.log_norm = math.log(L - 1)
        self.method = method
        ess = effective_sample_size(particles)
        warnings = []
        if ess < ess_floor:
            warnings.append(f"effective sample size {ess:.3g} below floor {ess_floor}")
            log.warning(warnings[-1])
        self.diagnostics = {"ess": ess, "n_outer": L, "L": L - 1, "warnings": warnings}

    def terms(self, targets: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        y = simulate_outcomes(self.outer_weights, self.outer_sd, self.eps, targets, states)
        ll = loglik_matrix(y, self.weights, self.noise_vars, targets, states, self.method)
        return contrast_terms(ll, self.self_idx, self.shift, self.log_norm)

    def __call__(self, targets: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        return torch.sum(torch.as_tensor(self.omega) * self.terms(targets, states))


def _batch_size(sample: RelaxedDesignSample) -> int:
    return sample.hard_targets.shape[-2]


def nmc(posterior: ParticleSet, sample: RelaxedDesignSample, n_outer: int = 30, L: int = 30, rng=None,
        include_outer: bool = False) -> EigEstimate:
    """NMC estimate and policy gradients at a (possibly stacked) policy sample."""
    objective = NestedMonteCarlo(posterior, _batch_size(sample), n_outer, L, rng, include_outer)
    return evaluate_with_gradients(objective, sample.params, sample.perturbation)


def iwnmc(particles: ParticleSet, sample: RelaxedDesignSample, rng=None, ess_floor: float = 2.0) -> EigEstimate:
    """Importance-weighted leave-one-out estimate and policy gradients."""
    objective = ImportanceWeightedNMC(particles, _batch_size(sample), rng, ess_floor)
    return evaluate_with_gradients(objective, sample.params, sample.perturbation)


def loo_nmc(particles: ParticleSet, sample: RelaxedDesignSample, rng=None) -> EigEstimate:
    """Leave-one-out NMC with uniform weights and no history."""
    flat = particles.with_probs(np.full(len(particles), 1.0 / len(particles)))
    return iwnmc(flat, sample, rng, ess_floor=0.0)


def design_tensors(designs: Sequence[Design], d: int) -> tuple[torch.Tensor, torch.Tensor]:
    t = np.stack([des.mask(d) for des in designs]).astype(float)
    s = np.stack([des.state_vector(d) for des in designs])
    return torch.as_tensor(t), torch.as_tensor(s)


def evaluate_design(objective, designs: Sequence[Design], d: int) -> float:
    """Objective value at a fixed hard design batch (no gradients)."""
    t, s = design_tensors(designs, d)
    with torch.no_grad():
        return float(objective(t, s))


@dataclass(frozen=True)
class GridPoint:
    target_spec: str
    states: tuple[float, ...]
    eig_nats: float


def format_targets(target_sets: Sequence[Sequence[int]]) -> str:
    """``((0,), (1, 2))`` -> ``"0|1+2"``; an empty set prints as ``obs``."""
    return "|".join("+".join(str(i) for i in ts) if ts else "obs" for ts in target_sets)


def eig_grid(posterior: ParticleSet, state_grid, target_pairs, n_outer: int = 30, L: int = 30, rng=None,
             mode: Optional[str] = None) -> list[GridPoint]:
    """NMC value over every target combination and state combination.

    Args:
        posterior: particle set.
        state_grid: values tried for each design's state (all of a design's
            targets share its state).
        target_pairs: sequence of target combinations; each is a tuple of
            ``B`` target sets, e.g. ``((0,), (1,))``.
        n_outer, L: estimator sizes.
        rng: random stream; one set of draws is shared by every grid point.
        mode: if ``"single"``, every target set must hold exactly one node.

    Returns:
        Grid points in row-major order over (targets, state_1, ..., state_B).
    """
    target_pairs = [tuple(tuple(ts) for ts in tp) for tp in target_pairs]
    if not target_pairs:
        raise ValueError("no target combinations given")
    B = len(target_pairs[0])
    if any(len(tp) != B for tp in target_pairs):
        raise ValueError("all target combinations must have the same batch size")
    if mode == "single" and any(len(ts) != 1 for tp in target_pairs for ts in tp):
        raise ValueError("single mode needs exactly one target per design")
    grid = np.asarray(state_grid, dtype=float)
    objective = NestedMonteCarlo(posterior, B, n_outer, L, rng)
    d = posterior.d
    out = []
    for tp in target_pairs:
        spec = format_targets(tp)
        for states in itertools.product(grid, repeat=B):
            designs = [Design(ts, (st,) * len(ts)) for ts, st in zip(tp, states)]
            out.append(GridPoint(spec, tuple(float(x) for x in states), evaluate_design(objective, designs, d)))
    return out


def write_grid_csv(path, points: Sequence[GridPoint]) -> None:
    B = len(points[0].states) if points else 0
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["target_spec"] + [f"state_{b + 1}" for b in range(B)] + ["eig_nats"])
        for p in points:
            writer.writerow([p.target_spec] + [repr(x) for x in p.states] + [repr(p.eig_nats)])
