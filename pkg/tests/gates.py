"""Finite-difference gates shared by the module tests and the acceptance run.

Step sizes come from a scan over ten random inputs per module. For the GIN
cross-entropy (|f| ~ 1) truncation error dominates at h = 1e-3 on
small-gradient weights, and h = 1e-4 keeps every element under 0.3e-4. For
the score network the full loss is ~10, almost all of it the constant
``||z||^2`` term, and at h <= 1e-3 the difference quotient's rounding error
(~eps |f| / h) lands right at the 1e-8 * 1e-4 budget of elements with
near-zero gradients. The gate therefore differentiates the loss with that
parameter-independent constant removed (same gradient, ``|f| ~ 1``) at h = 3e-4.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from fedgdiff.diffusion import (
    DEFAULT_SIGMAS, LabelNoiseEmbedding, ScoreNetwork, batch_adjacency, symmetric_noise,
)
from fedgdiff.gin import GinClassifier, batch_graphs, cross_entropy
from fedgdiff.nn import finite_difference_check, init_module, seeded

from .conftest import random_graph

SCORE_H = 3e-4
GIN_H = 1e-4
# depth as in the default network, narrower channels to keep the per-element loop short
GATE_NET = dict(depth=4, channels=4, hidden=8, num_levels=len(DEFAULT_SIGMAS))


class Joint(nn.Module):
    """Score network plus label embedding, so both get finite-difference checked together."""

    def __init__(self, net, emb):
        super().__init__()
        self.net, self.emb = net, emb


def centered_dsm_loss(score_fn, adj, mask, noise, sigmas, num_classes: int = 1):
    """``dsm_loss`` minus ``mean_b sum_l ||z_bl||^2 / (2 L K)``, which no parameter touches."""
    bsz, levels = sigmas.shape
    n = adj.shape[-1]
    flat = sigmas.reshape(-1)
    a = adj[:, None].expand(bsz, levels, n, n).reshape(-1, n, n)
    z = noise.reshape(-1, n, n)
    m = mask[:, None].expand(bsz, levels, n).reshape(-1, n)
    perturbed = a + flat[:, None, None] * z
    s = score_fn(perturbed, m, flat, torch.arange(levels).repeat(bsz))
    target = (a - perturbed) / flat[:, None, None] ** 2
    per = flat**2 * ((s * s).sum(dim=(1, 2)) - 2 * (s * target).sum(dim=(1, 2)))
    return per.reshape(bsz, levels).sum(dim=1).mean() / (2.0 * levels * num_classes)


def score_inputs(seed: int, n: int = 5):
    rng = np.random.default_rng(seed)
    adj, mask = batch_adjacency([random_graph(rng, n).adjacency], dtype=torch.float64)
    noise = symmetric_noise((1, len(DEFAULT_SIGMAS), n, n), mask, seeded(seed))
    return adj, mask, noise


def score_gradient_error(seed: int, labeled: bool) -> float:
    """Worst relative error for a fresh score network (and embedding) on a random 5-node graph."""
    adj, mask, noise = score_inputs(seed)
    net = init_module(lambda: ScoreNetwork(**GATE_NET), seed)
    if labeled:
        label = torch.tensor([seed % 2])
        module = Joint(net, LabelNoiseEmbedding(2))

        def objective(m, adj, mask, noise):
            return centered_dsm_loss(m.net, adj, mask, noise, m.emb(label), 2)
    else:
        module = net
        ladder = torch.tensor(DEFAULT_SIGMAS, dtype=torch.float64)[None]

        def objective(m, adj, mask, noise):
            return centered_dsm_loss(m, adj, mask, noise, ladder)

    return finite_difference_check(module, adj, mask, noise, objective=objective, h=SCORE_H)


def gin_gradient_error(seed: int) -> float:
    rng = np.random.default_rng(seed)
    graphs = [random_graph(rng, int(rng.integers(3, 8)), dim=4, label=int(rng.integers(0, 3)))
              for _ in range(4)]
    clf = init_module(lambda: GinClassifier(4, 3, hidden=8, layers=3), seed)
    return finite_difference_check(clf, *batch_graphs(graphs), objective=cross_entropy, h=GIN_H)
