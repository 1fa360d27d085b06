import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chi2_contingency

from diffcbed.policy import (
    FixedState,
    PolicyParams,
    TemperatureSchedule,
    UniformState,
    anneal_temperature,
    hard_targets,
    init_policy,
    mode_design,
    random_baseline,
    relax,
    sample_relaxed,
    straight_through,
    to_design_batch,
)
from diffcbed.scm import Design

MODES = [("single", None), ("multi_unconstrained", None), ("multi_constrained", 2)]


def params(mode, k=None, logits=None, B=2, d=4, temperature=1.0, rng=None):
    rng = rng or np.random.default_rng(0)
    logits = rng.normal(size=(B, d)) if logits is None else np.asarray(logits, dtype=float)
    return PolicyParams(logits, rng.uniform(-10, 10, size=logits.shape), mode, temperature, k)


def test_params_validation():
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((2, 3)), np.zeros((2, 3)), "multi_constrained", 1.0, k=4)
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((2, 3)), np.zeros((2, 3)), "single", 0.0)
    with pytest.raises(ValueError):
        PolicyParams(np.zeros((2, 3)), np.zeros((2, 2)), "single", 1.0)


@pytest.mark.parametrize("mode,k", MODES)
def test_sample_invariants(mode, k, rng):
    p = params(mode, k, B=3, d=5, temperature=0.7, rng=rng)
    s = sample_relaxed(p, rng, n_samples=500)
    rows = s.hard_targets.sum(axis=-1)
    assert set(np.unique(s.hard_targets)) <= {0.0, 1.0}
    assert np.all(s.soft_targets >= 0)
    if mode != "multi_constrained":
        assert np.all(s.soft_targets <= 1)
    if mode == "single":
        assert np.all(rows == 1)
        np.testing.assert_allclose(s.soft_targets.sum(axis=-1), 1.0, atol=1e-12)
    elif mode == "multi_constrained":
        assert np.all(rows == k)
        np.testing.assert_allclose(s.soft_targets.sum(axis=-1), k, atol=1e-6)
    assert np.array_equal(s.masked_states, s.hard_targets * s.states)


def test_single_hard_is_argmax_of_soft(rng):
    p = params("single", temperature=2.0, rng=rng)
    s = sample_relaxed(p, rng, n_samples=200)
    assert np.array_equal(np.argmax(s.soft_targets, -1), np.argmax(s.hard_targets, -1))


def test_unconstrained_hard_thresholds_soft(rng):
    p = params("multi_unconstrained", temperature=2.0, rng=rng)
    s = sample_relaxed(p, rng, n_samples=200)
    assert np.array_equal(s.hard_targets, (s.soft_targets > 0.5).astype(float))


def test_low_temperature_matches_gumbel_max(rng):
    p = params("single", temperature=1e-4, rng=rng)
    s = sample_relaxed(p, rng, n_samples=100)
    expected = np.argmax(p.target_logits + s.perturbation, axis=-1)
    assert np.array_equal(np.argmax(s.soft_targets, -1), expected)
    np.testing.assert_allclose(s.soft_targets, s.hard_targets, atol=1e-6)


def test_dominant_logit_always_selected(rng):
    logits = np.zeros((1, 4))
    logits[0, 2] = 40.0
    s = sample_relaxed(params("single", logits=logits, rng=rng), rng, n_samples=10_000)
    assert np.all(s.hard_targets[..., 0, 2] == 1)


def test_constrained_top_two(rng):
    logits = np.array([[10.0, 10.0, -10.0, -10.0]])
    p = params("multi_constrained", 2, logits=logits, rng=rng)
    s = sample_relaxed(p, rng, n_samples=20_000)
    exact = np.all(s.hard_targets[:, 0] == [1, 1, 0, 0], axis=-1)
    assert exact.mean() >= 0.99


def test_constrained_marginals_match_sequential_sampling(rng):
    # top-k of Gumbel-perturbed logits equals sampling k items without replacement
    logits = np.array([[1.0, 0.5, 0.0, -1.0]])
    p = params("multi_constrained", 2, logits=logits, rng=rng)
    freq = sample_relaxed(p, rng, n_samples=100_000).hard_targets[:, 0].mean(axis=0)
    probs = np.exp(logits[0]) / np.exp(logits[0]).sum()
    oracle = np.zeros(4)
    for i in range(4):
        for j in range(4):
            if i != j:
                pij = probs[i] * probs[j] / (1 - probs[i])
                oracle[i] += pij
                oracle[j] += pij
    np.testing.assert_allclose(freq, oracle, atol=0.01)


@pytest.mark.parametrize("mode,k", [("single", None), ("multi_constrained", 2)])
def test_logit_shift_leaves_hard_distribution_unchanged(mode, k, rng):
    base = np.array([[0.3, -0.2, 0.8, 0.0]])
    counts = []
    for shift in (0.0, 7.5):
        s = sample_relaxed(params(mode, k, logits=base + shift, rng=rng), rng, n_samples=100_000)
        h = s.hard_targets[:, 0]
        counts.append(h.sum(axis=0))
    _, pvalue, _, _ = chi2_contingency(np.array(counts))
    assert pvalue > 0.001


def test_entropy_decreases_with_temperature(rng):
    logits = rng.normal(size=(2, 5))
    pert = rng.gumbel(size=(2000, 2, 5))
    entropies = []
    for tau in (5.0, 2.0, 1.0, 0.5, 0.1):
        soft = relax(torch.as_tensor(logits), torch.as_tensor(pert), "single", tau).numpy()
        entropies.append(float(-(soft * np.log(np.clip(soft, 1e-300, None))).sum(-1).mean()))
    assert all(a >= b for a, b in zip(entropies, entropies[1:]))


def test_straight_through_forward_and_backward():
    weights = torch.tensor([[1.0, 2.0, 3.0]], dtype=torch.float64)
    logits = torch.zeros(1, 3, dtype=torch.float64, requires_grad=True)
    hard = torch.tensor([[0.0, 1.0, 0.0]], dtype=torch.float64)
    out = straight_through(torch.softmax(logits, -1), hard)
    assert torch.equal(out, hard)
    (out * weights).sum().backward()
    ref = torch.zeros(1, 3, dtype=torch.float64, requires_grad=True)
    (torch.softmax(ref, -1) * weights).sum().backward()
    assert torch.allclose(logits.grad, ref.grad)


def test_to_design_batch_examples():
    p = PolicyParams(np.zeros((2, 3)), np.array([[5.0, -2.0, 7.0], [1.0, 2.0, 3.0]]), "multi_unconstrained", 1.0)
    from diffcbed.policy import RelaxedDesignSample

    hard = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 0.0]])
    s = RelaxedDesignSample(hard, hard, p.state_values, np.zeros((2, 3)), p)
    batch = to_design_batch(s)
    assert batch == (Design((1,), (-2.0,)), Design())
    s_single = RelaxedDesignSample(hard, hard, p.state_values, np.zeros((2, 3)), p.copy(mode="single"))
    with pytest.raises(RuntimeError):
        to_design_batch(s_single)


def test_mode_design():
    p = PolicyParams(np.array([[0.0, 3.0, 1.0]]), np.array([[4.0, 5.0, 6.0]]), "multi_constrained", 1.0, k=2)
    assert mode_design(p) == (Design((1, 2), (5.0, 6.0)),)
    p = PolicyParams(np.array([[-1.0, 3.0, 1.0]]), np.array([[4.0, 5.0, 6.0]]), "multi_unconstrained", 1.0)
    assert mode_design(p) == (Design((1, 2), (5.0, 6.0)),)


def test_anneal_examples():
    sched = TemperatureSchedule()
    assert anneal_temperature(sched, 0, 100) == 5.0
    assert anneal_temperature(sched, 100, 100) == pytest.approx(0.5, rel=1e-15)
    assert anneal_temperature(sched, 50, 100) == pytest.approx(np.sqrt(2.5))
    assert anneal_temperature(TemperatureSchedule.fixed(0.1), 30, 100) == 0.1
    with pytest.raises(ValueError):
        anneal_temperature(sched, 101, 100)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 99))
def test_anneal_is_monotone(c):
    sched = TemperatureSchedule()
    assert anneal_temperature(sched, c + 1, 100) < anneal_temperature(sched, c, 100)


def test_random_fixed_baselines(rng):
    for _ in range(50):
        batch = random_baseline("single", FixedState(0.0), 3, 4, rng)
        assert all(len(d.targets) == 1 and d.states == (0.0,) for d in batch)
        multi = random_baseline("multi_unconstrained", FixedState(5.0), 3, 4, rng)
        assert all(all(s == 5.0 for s in d.states) for d in multi)
    sizes = [len(d.targets) for _ in range(2000) for d in random_baseline("multi_unconstrained", FixedState(5.0), 1, 4, rng)]
    assert abs(np.mean(sizes) - 2.0) < 0.1
    k2 = random_baseline("multi_constrained", FixedState(5.0), 4, 5, rng, k=2)
    assert all(len(d.targets) == 2 for d in k2)


def test_random_random_states(rng):
    states = [s for _ in range(4000) for d in random_baseline("single", UniformState(-10, 10), 2, 3, rng)
              for s in d.states]
    assert min(states) >= -10 and max(states) <= 10
    assert abs(np.mean(states)) < 0.3


def test_policy_json_round_trip(rng):
    p = init_policy(2, 4, "multi_constrained", rng, k=2)
    text = json.dumps(p.to_dict())
    assert list(json.loads(text)) == ["mode", "k", "target_logits", "state_values", "temperature"]
    q = PolicyParams.from_dict(json.loads(text))
    assert np.array_equal(q.state_values, p.state_values) and q.k == 2 and q.mode == p.mode


def test_hard_targets_from_keys():
    keys = np.array([[0.1, -0.3, 2.0]])
    assert hard_targets(keys, np.zeros_like(keys), "single").tolist() == [[0, 0, 1]]
    assert hard_targets(keys, np.zeros_like(keys), "multi_unconstrained").tolist() == [[1, 0, 1]]
    assert hard_targets(keys, np.zeros_like(keys), "multi_constrained", 2).tolist() == [[1, 0, 1]]
