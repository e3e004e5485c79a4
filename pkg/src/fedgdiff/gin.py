"""GIN graph classifier with mean-pooled readout."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch
from scipy.stats import rankdata
from torch import nn

from .graphs import Graph, GraphSet
from .nn import AdamState, ContractError, adam_step, param_store


@dataclass
class TrainConfig:
    lr: float = 0.01
    max_epochs: int = 500
    patience: int = 30
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


class GinClassifier(nn.Module):
    """``h <- act(MLP((1 + eps) h + sum_{u in N(v)} h_u))`` per layer, mean pool, linear head.

    SiLU is used instead of ReLU so gradients are smooth enough for the
    finite-difference gate.
    """

    def __init__(self, in_dim: int, num_classes: int, hidden: int = 32, layers: int = 3):
        super().__init__()
        self.in_dim, self.num_classes, self.hidden, self.layers = in_dim, num_classes, hidden, layers
        self.eps = nn.Parameter(torch.zeros(layers))
        self.mlps = nn.ModuleList()
        width = in_dim
        for _ in range(layers):
            self.mlps.append(nn.Sequential(nn.Linear(width, hidden), nn.SiLU(), nn.Linear(hidden, hidden)))
            width = hidden
        self.head = nn.Linear(hidden, num_classes)

    def embed(self, adj, x, mask):
        """Pooled embeddings for a padded batch ``adj (B,n,n)``, ``x (B,n,d)``, ``mask (B,n)``."""
        if x.shape[-1] != self.in_dim:
            raise ContractError(f"feature dim {x.shape[-1]} != classifier input dim {self.in_dim}")
        h = x
        for layer, mlp in enumerate(self.mlps):
            h = nn.functional.silu(mlp((1.0 + self.eps[layer]) * h + adj @ h))
        m = mask.unsqueeze(-1)
        return (h * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)

    def forward(self, adj, x, mask):
        return self.head(self.embed(adj, x, mask))

    def architecture(self) -> dict:
        return {"layers": self.layers, "in_dim": self.in_dim, "hidden": self.hidden,
                "num_classes": self.num_classes}


def batch_graphs(graphs: list[Graph], dtype=torch.float32):
    n = max(g.node_count for g in graphs)
    d = graphs[0].feature_dim
    adj = torch.zeros(len(graphs), n, n, dtype=dtype)
    x = torch.zeros(len(graphs), n, d, dtype=dtype)
    mask = torch.zeros(len(graphs), n, dtype=dtype)
    for b, g in enumerate(graphs):
        k = g.node_count
        adj[b, :k, :k] = torch.from_numpy(g.adjacency.astype(np.float32))
        x[b, :k] = torch.from_numpy(g.features)
        mask[b, :k] = 1.0
    y = torch.tensor([g.label for g in graphs], dtype=torch.long)
    return adj.to(dtype), x.to(dtype), mask, y


def gin_forward(clf: GinClassifier, g: Graph):
    adj, x, mask, _ = batch_graphs([g])
    if g.feature_dim != clf.in_dim:
        raise ContractError(f"graph feature dim {g.feature_dim} != classifier input dim {clf.in_dim}")
    with torch.no_grad():
        emb = clf.embed(adj, x, mask)
        return emb[0], clf.head(emb)[0]


def cross_entropy(clf: GinClassifier, adj, x, mask, y) -> torch.Tensor:
    return nn.functional.cross_entropy(clf(adj, x, mask), y)


def dataset_loss(clf: GinClassifier, gs, batch_size: int = 256) -> float:
    graphs = list(gs)
    total = 0.0
    with torch.no_grad():
        for start in range(0, len(graphs), batch_size):
            chunk = graphs[start : start + batch_size]
            total += cross_entropy(clf, *batch_graphs(chunk)).item() * len(chunk)
    return total / len(graphs)


def train_epoch(clf: GinClassifier, graphs: list[Graph], state: AdamState, cfg: TrainConfig, rng) -> float:
    params = param_store(clf)
    order = rng.permutation(len(graphs))
    total = 0.0
    for start in range(0, len(graphs), cfg.batch_size):
        batch = [graphs[i] for i in order[start : start + cfg.batch_size]]
        loss = cross_entropy(clf, *batch_graphs(batch))
        grads = dict(zip(params, torch.autograd.grad(loss, list(params.values()))))
        adam_step(params, grads, state)
        total += loss.item() * len(batch)
    return total / len(graphs)


def train_gnn(train: GraphSet, val: GraphSet | None, clf_init: GinClassifier, cfg: TrainConfig):
    """Adam on mean cross-entropy with early stopping; returns the best snapshot and the trace.

    The monitored loss is the validation loss, or the training loss when no
    validation graphs are given. Training stops once it has not improved for
    ``cfg.patience`` consecutive epochs.
    """
    graphs = list(train)
    if not graphs:
        raise ValueError("training set is empty")
    clf = copy.deepcopy(clf_init)
    state = AdamState(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    best, best_state, since = np.inf, copy.deepcopy(clf.state_dict()), 0
    trace = []
    for _ in range(cfg.max_epochs):
        train_loss = train_epoch(clf, graphs, state, cfg, rng)
        monitored = dataset_loss(clf, val) if val is not None and len(val) else train_loss
        trace.append({"train": train_loss, "monitored": monitored})
        if monitored < best:
            best, best_state, since = monitored, copy.deepcopy(clf.state_dict()), 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    clf.load_state_dict(best_state)
    return clf, trace


def predict_proba(clf: GinClassifier, gs, batch_size: int = 256) -> np.ndarray:
    graphs = list(gs)
    out = []
    with torch.no_grad():
        for start in range(0, len(graphs), batch_size):
            adj, x, mask, _ = batch_graphs(graphs[start : start + batch_size])
            out.append(torch.softmax(clf(adj, x, mask), dim=-1).numpy())
    return np.concatenate(out, axis=0).astype(np.float64)


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based AUC; tied scores count one half."""
    positive = np.asarray(positive, dtype=bool)
    n_pos, n_neg = positive.sum(), (~positive).sum()
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def macro_auc(probs: np.ndarray, labels: np.ndarray) -> float:
    """One-vs-rest macro AUC over classes that have both positives and negatives."""
    labels = np.asarray(labels)
    aucs = []
    for k in range(probs.shape[1]):
        pos = labels == k
        if pos.any() and (~pos).any():
            aucs.append(binary_auc(probs[:, k], pos))
    if not aucs:
        raise ValueError("AUC undefined: no class has both positive and negative examples")
    return float(np.mean(aucs))


def evaluate_classifier(clf: GinClassifier, test: GraphSet) -> tuple[float, float]:
    if len(test) == 0:
        raise ValueError("test set is empty")
    probs = predict_proba(clf, test)
    labels = np.array([g.label for g in test])
    accuracy = float(np.mean(probs.argmax(axis=1) == labels))
    return accuracy, macro_auc(probs, labels)
