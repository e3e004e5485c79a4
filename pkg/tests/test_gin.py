from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fedgdiff.gin import (
    GinClassifier, TrainConfig, binary_auc, evaluate_classifier, gin_forward, macro_auc, predict_proba,
    train_gnn,
)
from fedgdiff.graphs import Graph
from fedgdiff.nn import ContractError, flatten, init_module, param_store

from .conftest import random_graph
from .gates import gin_gradient_error


def _clf(in_dim=4, k=2, seed=0, hidden=16):
    return init_module(lambda: GinClassifier(in_dim, k, hidden=hidden, layers=3), seed)


def test_learns_triangles_vs_cliques(toy):
    clf, trace = train_gnn(toy, None, _clf(), TrainConfig(lr=0.01, max_epochs=200, patience=200))
    acc, auc = evaluate_classifier(clf, toy)
    assert acc == 1.0 and auc == 1.0
    assert len(trace) <= 200


def test_zero_lr_stops_after_patience(toy):
    # a fixed validation set, since reshuffled batches move the training loss by float roundoff
    _, trace = train_gnn(toy, toy, _clf(), TrainConfig(lr=0.0, max_epochs=500, patience=30))
    assert len(trace) == 31
    assert len({t["monitored"] for t in trace}) == 1


def test_validation_loss_is_monitored(toy):
    val = toy.subset(range(0, 200, 10))
    _, trace = train_gnn(toy, val, _clf(), TrainConfig(max_epochs=3, patience=5))
    assert all(np.isfinite(t["train"]) and np.isfinite(t["monitored"]) for t in trace)
    assert trace[0]["train"] != trace[0]["monitored"]


def test_training_is_deterministic(toy):
    cfg = TrainConfig(max_epochs=5, seed=4)
    a, _ = train_gnn(toy, None, _clf(seed=2), cfg)
    b, _ = train_gnn(toy, None, _clf(seed=2), cfg)
    assert np.array_equal(flatten(param_store(a)), flatten(param_store(b)))


def test_empty_training_set(toy):
    with pytest.raises(ValueError):
        train_gnn(toy.subset([]), None, _clf(), TrainConfig())


def test_permutation_invariance(rng):
    clf = _clf(in_dim=3, k=3, seed=1)
    for _ in range(20):
        g = random_graph(rng, int(rng.integers(2, 10)))
        perm = rng.permutation(g.node_count)
        _, logits = gin_forward(clf, g)
        _, logits_p = gin_forward(clf, g.permuted(perm))
        assert torch.max(torch.abs(logits - logits_p)) <= 1e-6


def test_isolated_node_reduces_to_mlp_stack():
    clf = _clf(in_dim=3, k=2, seed=5)
    x = torch.tensor([[0.2, -1.0, 0.7]])
    _, logits = gin_forward(clf, Graph(np.zeros((1, 1)), x.numpy(), 0))
    h = x
    with torch.no_grad():
        for mlp in clf.mlps:
            h = torch.nn.functional.silu(mlp(h))
        expected = clf.head(h)[0]
    assert torch.allclose(logits, expected, atol=1e-7)


def test_feature_dim_mismatch(rng):
    with pytest.raises(ContractError):
        gin_forward(_clf(in_dim=4), random_graph(rng, 5, dim=3))


@pytest.mark.parametrize("seed", range(3))
def test_gin_gradients(seed):
    assert gin_gradient_error(seed) <= 1e-4


# ---------------------------------------------------------------- AUC


def test_random_scores_auc_near_half():
    gen = np.random.default_rng(0)
    labels = np.repeat([True, False], 5000)
    assert abs(binary_auc(gen.random(10_000), labels) - 0.5) <= 0.02


def test_perfect_and_tied_auc():
    labels = np.array([0, 0, 1, 1], dtype=bool)
    assert binary_auc(np.array([0.1, 0.2, 0.8, 0.9]), labels) == 1.0
    assert binary_auc(np.array([0.9, 0.8, 0.2, 0.1]), labels) == 0.0
    assert binary_auc(np.full(4, 0.5), labels) == 0.5


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.booleans()), min_size=2, max_size=30))
def test_auc_matches_pair_count(pairs):
    scores = np.array([s for s, _ in pairs])
    pos = np.array([p for _, p in pairs])
    if pos.all() or not pos.any():
        return
    wins = [1.0 if a > b else 0.5 if a == b else 0.0 for a in scores[pos] for b in scores[~pos]]
    assert binary_auc(scores, pos) == pytest.approx(np.mean(wins), abs=1e-12)


def test_macro_auc_skips_single_sided_classes():
    probs = np.array([[0.9, 0.1, 0.0], [0.2, 0.8, 0.0], [0.6, 0.4, 0.0]])
    assert macro_auc(probs, np.array([0, 1, 0])) == 1.0
    with pytest.raises(ValueError):
        macro_auc(probs, np.zeros(3, dtype=int))


def test_predicted_probabilities_are_distributions(toy):
    p = predict_proba(_clf(), toy)
    assert p.shape == (200, 2) and np.allclose(p.sum(axis=1), 1.0, atol=1e-6)
