"""Shared test builders and oracles."""
import numpy as np
import torch
from scipy import integrate, stats

from diffcbed.data import ParticleSet
from diffcbed.optim import evaluate_with_gradients, finite_difference, relative_error
from diffcbed.policy import PolicyParams, hard_targets, relax
from diffcbed.scm import Dag, Scm


def two_hypotheses(weight: float = 1.5, probs=(0.5, 0.5), log_hist_lik=None) -> ParticleSet:
    """Edge 0 -> 1 with ``weight`` versus the empty graph, unit noise."""
    w = np.zeros((2, 2))
    w[0, 1] = weight
    edge = Scm(Dag(2, ((0, 1),)), w, np.ones(2))
    empty = Scm(Dag(2), np.zeros((2, 2)), np.ones(2))
    return ParticleSet.from_scms([edge, empty], probs=np.asarray(probs, dtype=float), log_hist_lik=log_hist_lik)


def replicate(particles: ParticleSet, n: int) -> ParticleSet:
    """Each particle repeated ``n`` times, weights kept proportional."""
    idx = np.repeat(np.arange(len(particles)), n)
    lh = None if particles.log_hist_lik is None else particles.log_hist_lik[idx]
    probs = particles.probs[idx]
    return ParticleSet(particles.adjacency[idx], particles.weights[idx], particles.noise_vars[idx],
                       probs / probs.sum(), lh)


def conditional_mi(means, prior, grid) -> np.ndarray:
    """MI between a discrete label and ``y ~ N(means[label], 1)``, one row per mean set.

    Args:
        means: ``(n, K)`` component means.
        prior: ``(K,)`` label probabilities.
        grid: integration nodes for ``y``, uniformly spaced.
    """
    means = np.atleast_2d(means)
    logc = stats.norm.logpdf(grid[None, None, :] - means[:, :, None])
    logmix = np.logaddexp.reduce(np.log(prior)[None, :, None] + logc, axis=1)
    integrand = np.einsum("k,nky->ny", prior, np.exp(logc) * (logc - logmix[:, None]))
    return integrate.trapezoid(integrand, grid, axis=1)


def two_hypothesis_mi(weight: float = 1.5, prior_edge: float = 0.5, state=None, n: int = 2001) -> float:
    """Mutual information between the graph indicator and one outcome.

    Node 0 has the same law under both graphs, so the information is the
    average over ``x0`` of a one-dimensional conditional MI.  With ``state``
    set, node 0 is intervened on.  Grid quadrature, error far below 1e-6.
    """
    prior = np.array([prior_edge, 1.0 - prior_edge])
    x0 = np.array([state], dtype=float) if state is not None else np.linspace(-12, 12, n)
    means = np.stack([weight * x0, np.zeros_like(x0)], axis=1)
    span = 12 + abs(weight) * np.abs(x0).max()
    grid = np.linspace(-span, span, 2 * n)
    inner = np.concatenate([conditional_mi(means[i:i + 256], prior, grid) for i in range(0, len(x0), 256)])
    if state is not None:
        return float(inner[0])
    return float(integrate.trapezoid(stats.norm.pdf(x0) * inner, x0))


def two_hypothesis_batch_mi(states, weight: float = 1.5, prior_edge: float = 0.5, n: int = 801) -> float:
    """MI between the graph indicator and the outcomes of ``do(X0 = s_b)`` for each state.

    Two intervened outcomes of node 1 are independent given the graph; the
    mixture entropy is integrated on a two-dimensional grid.
    """
    s1, s2 = states
    prior = np.array([prior_edge, 1.0 - prior_edge])
    span = 10 + abs(weight) * max(abs(s1), abs(s2))
    y = np.linspace(-span, span, n)
    y1, y2 = np.meshgrid(y, y, indexing="ij")
    logc = np.stack([stats.norm.logpdf(y1 - weight * s1) + stats.norm.logpdf(y2 - weight * s2),
                     stats.norm.logpdf(y1) + stats.norm.logpdf(y2)])
    logmix = np.logaddexp(np.log(prior[0]) + logc[0], np.log(prior[1]) + logc[1])
    integrand = sum(prior[g] * np.exp(logc[g]) * (logc[g] - logmix) for g in range(2))
    return float(integrate.trapezoid(integrate.trapezoid(integrand, y, axis=1), y))


def gradient_check(objective, params: PolicyParams, perturbation, h: float = 1e-4):
    """Relative errors of autograd against central differences.

    State differences use the hard design; logit differences follow the
    straight-through soft path with frozen noise.

    Returns:
        ``(state_error, logit_error)`` as arrays matching the parameters.
    """
    est = evaluate_with_gradients(objective, params, perturbation)
    pert = torch.as_tensor(perturbation)
    hard = torch.as_tensor(hard_targets(params.target_logits, perturbation, params.mode, params.k))
    base = relax(torch.as_tensor(params.target_logits), pert, params.mode, params.temperature, params.k)

    def f_states(s):
        with torch.no_grad():
            return float(objective(hard, torch.as_tensor(s)))

    def f_logits(lg):
        with torch.no_grad():
            soft = relax(torch.as_tensor(lg), pert, params.mode, params.temperature, params.k)
            return float(objective(hard + soft - base, torch.as_tensor(params.state_values)))

    fd_s = finite_difference(f_states, params.state_values, h)
    fd_l = finite_difference(f_logits, params.target_logits, h)
    return relative_error(est.grad_state_values, fd_s), relative_error(est.grad_target_logits, fd_l)
