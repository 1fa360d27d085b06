import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy.stats import multivariate_normal

from diffcbed.scm import (
    Dag,
    Design,
    GraphError,
    Scm,
    batch_log_likelihood,
    log_likelihood,
    sample,
    stacked_log_likelihood,
    topological_order,
)


def test_topological_order_examples():
    assert topological_order(Dag(3, ((0, 1), (1, 2)))) == (0, 1, 2)
    assert topological_order(Dag(3)) == (0, 1, 2)
    assert topological_order(Dag(3, ((2, 0), (0, 1)))) == (2, 0, 1)


@pytest.mark.parametrize("edges", [((0, 1), (1, 0)), ((0, 0),), ((0, 1), (0, 1)), ((0, 5),)])
def test_invalid_graphs_rejected(edges):
    with pytest.raises(GraphError):
        Dag(3, edges)


def test_cycle_in_serialized_graph_rejected():
    with pytest.raises(GraphError):
        Dag.from_dict({"d": 3, "edges": [[0, 1], [1, 2], [2, 0]]})


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_order_respects_every_edge(d, seed):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(d)
    edges = [(int(perm[a]), int(perm[b])) for a in range(d) for b in range(a + 1, d) if rng.random() < 0.5]
    dag = Dag(d, tuple(edges))
    pos = {v: i for i, v in enumerate(topological_order(dag))}
    assert sorted(pos) == list(range(d))
    assert all(pos[i] < pos[j] for i, j in dag.edges)


def test_weight_on_non_edge_rejected():
    w = np.zeros((2, 2))
    w[1, 0] = 1.0
    with pytest.raises(ValueError):
        Scm(Dag(2, ((0, 1),)), w, np.ones(2))


def test_nonpositive_noise_rejected():
    with pytest.raises(ValueError):
        Scm(Dag(2), np.zeros((2, 2)), np.array([1.0, 0.0]))


def test_intervened_column_is_exact(chain3, rng):
    out = sample(chain3, Design((1,), (3.0,)), 500, rng)
    assert np.all(out.values[:, 1] == 3.0)
    assert out.design == Design((1,), (3.0,))


def test_edgeless_samples_are_standard_normal(rng):
    scm = Scm(Dag(3), np.zeros((3, 3)), np.ones(3))
    x = sample(scm, Design(), 50_000, rng).values
    assert_allclose(x.mean(axis=0), 0.0, atol=0.03)
    assert_allclose(x.var(axis=0), 1.0, atol=0.03)


def test_chain_variance_matches_closed_form(rng):
    w = np.array([[0.0, 1.0], [0.0, 0.0]])
    scm = Scm(Dag(2, ((0, 1),)), w, np.ones(2))
    x = sample(scm, Design(), 100_000, rng).values
    # Var(X1) = w^2 Var(X0) + 1 = 2; standard error of the variance is about 0.009
    assert abs(x[:, 1].var() - 2.0) < 0.04


def test_sampling_is_deterministic(chain3):
    a = sample(chain3, Design((0,), (1.0,)), 10, np.random.default_rng(7)).values
    b = sample(chain3, Design((0,), (1.0,)), 10, np.random.default_rng(7)).values
    assert np.array_equal(a, b)


def test_log_likelihood_examples():
    scm = Scm(Dag(1), np.zeros((1, 1)), np.ones(1))
    assert log_likelihood(scm, [0.0], Design()) == pytest.approx(-0.918938533, abs=1e-9)
    assert log_likelihood(scm, [2.5], Design((0,), (2.5,))) == 0.0


def test_chain_log_likelihood_matches_joint_density():
    w, v0, v1 = 1.7, 0.5, 2.0
    scm = Scm(Dag(2, ((0, 1),)), np.array([[0.0, w], [0.0, 0.0]]), np.array([v0, v1]))
    cov = np.array([[v0, w * v0], [w * v0, w * w * v0 + v1]])
    y = np.array([0.3, -1.2])
    expected = multivariate_normal(np.zeros(2), cov).logpdf(y)
    assert log_likelihood(scm, y, Design()) == pytest.approx(expected, abs=1e-12)


def test_intervened_noise_does_not_enter(chain3):
    y = np.array([0.4, 2.0, 1.1])
    des = Design((1,), (2.0,))
    other = Scm(chain3.dag, chain3.weights, np.array([1.0, 37.0, 1.0]))
    assert log_likelihood(chain3, y, des) == log_likelihood(other, y, des)


def test_batch_log_likelihood(chain3):
    ys = [np.array([0.1, 0.2, 0.3]), np.array([1.0, -2.0, 0.5])]
    d1, d2 = Design(), Design((1,), (-2.0,))
    assert batch_log_likelihood(chain3, ys[:1], [d1]) == log_likelihood(chain3, ys[0], d1)
    assert batch_log_likelihood(chain3, [ys[0]] * 2, [d1] * 2) == pytest.approx(2 * log_likelihood(chain3, ys[0], d1))
    # term-by-term oracle for a mixed batch
    def node_term(y, j):
        mean = y @ chain3.weights[:, j]
        return -0.5 * ((y[j] - mean) ** 2 + np.log(2 * np.pi))

    expected = sum(node_term(ys[0], j) for j in range(3)) + node_term(ys[1], 0) + node_term(ys[1], 2)
    assert batch_log_likelihood(chain3, ys, [d1, d2]) == pytest.approx(expected, abs=1e-12)
    with pytest.raises(ValueError):
        batch_log_likelihood(chain3, ys, [d1])


def test_stacked_log_likelihood_matches_loop(chain3, rng):
    values = sample(chain3, Design(), 7, rng).values
    values[3:, 2] = 0.5
    masks = np.zeros_like(values, dtype=bool)
    masks[3:, 2] = True
    designs = [Design()] * 3 + [Design((2,), (0.5,))] * 4
    got = stacked_log_likelihood(chain3.weights[None], chain3.noise_vars[None], values, masks)
    assert got[0] == pytest.approx(batch_log_likelihood(chain3, list(values), designs), abs=1e-10)


def test_json_round_trip(chain3):
    text = json.dumps(chain3.to_dict())
    assert list(json.loads(text)) == ["d", "edges", "weights", "noise_vars"]
    assert Scm.from_dict(json.loads(text)) == chain3
    des = Design((2, 0), (1.0, -3.5))
    assert des.targets == (0, 2)
    assert Design.from_dict(json.loads(json.dumps(des.to_dict()))) == des


def test_design_validation():
    with pytest.raises(ValueError):
        Design((0, 1), (1.0,))
    with pytest.raises(ValueError):
        Design((0, 0), (1.0, 2.0))
    with pytest.raises(ValueError):
        Design((4,), (1.0,)).validate(3)
