"""Triangle / 4-clique toy corpus used by smoke tests and the ``gen-toy-data`` command."""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .diffusion import (
    DiffusionConfig, DiffusionModel, LabelNoiseEmbedding, SamplerConfig, ScoreNetwork, binarize,
    sample_continuous, train_diffusion,
)
from .graphs import Graph, GraphSet, one_hot_degree_features
from .metrics import graph_statistics, mmd
from .nn import init_module


def clique(n: int) -> np.ndarray:
    return (np.ones((n, n)) - np.eye(n)).astype(np.uint8)


def toy_graphset(per_class: int = 100, name: str = "TOY") -> GraphSet:
    """``per_class`` triangles (label 0) followed by ``per_class`` 4-cliques (label 1)."""
    graphs = [Graph(clique(3), np.ones((3, 1)), 0, name) for _ in range(per_class)]
    graphs += [Graph(clique(4), np.ones((4, 1)), 1, name) for _ in range(per_class)]
    return one_hot_degree_features(GraphSet(graphs, 2, 1, name, feature_kind="none"), 3)


def write_tu_dataset(gs: GraphSet, directory, name: str | None = None) -> Path:
    """Write ``gs`` in the TUDataset text layout (no node labels)."""
    name = name or gs.name
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    edges, indicator, labels = [], [], []
    offset = 0
    for gid, g in enumerate(gs, start=1):
        indicator += [gid] * g.node_count
        labels.append(g.label)
        for u, v in zip(*np.nonzero(g.adjacency)):
            edges.append(f"{u + offset + 1}, {v + offset + 1}")
        offset += g.node_count
    (directory / f"{name}_A.txt").write_text("\n".join(edges) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(map(str, indicator)) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text("\n".join(map(str, labels)) + "\n")
    return directory


def stub_diffusion_model(seed: int, num_classes: int = 2, variant: str = "advanced") -> DiffusionModel:
    """A tiny randomly initialised diffusion model for protocol-level tests."""
    sigmas = (0.5, 0.1)
    model = DiffusionModel(variant, num_classes, torch.tensor(sigmas, dtype=torch.float32))
    model.node_counts = {k: np.array([0.0, 0.0, 0.0, 1.0]) for k in range(num_classes)}
    if variant == "basic":
        for k in range(num_classes):
            model.networks[k] = init_module(lambda: ScoreNetwork(1, 2, 2, len(sigmas)), seed * 31 + k)
    else:
        model.networks[0] = init_module(lambda: ScoreNetwork(1, 2, 2, len(sigmas)), seed)
        model.embedding = LabelNoiseEmbedding(num_classes, sigmas)
    model.loss_trace.append([])
    return model


@dataclass
class FidelityResult:
    correct: dict  # label -> samples whose binarized structure is the expected clique
    samples: int
    degree_mmd: float
    seconds: float

    def fraction(self, label: int) -> float:
        return self.correct[label] / self.samples


def toy_fidelity(cfg: DiffusionConfig | None = None, per_class: int = 100, samples: int = 50,
                 seed: int = 0, sampler: SamplerConfig | None = None) -> FidelityResult:
    """Train the labeled model on triangles and 4-cliques, then sample both classes."""
    start = time.perf_counter()
    gs = toy_graphset(per_class)
    model = train_diffusion(gs, "advanced", cfg or DiffusionConfig(), seed)
    sampler = sampler or SamplerConfig()
    correct, generated = {}, []
    for label, size in ((0, 3), (1, 4)):
        adjs = [binarize(a) for a in sample_continuous(model, label, samples, sampler, seed + 1 + label)]
        correct[label] = sum(np.array_equal(a, clique(size)) for a in adjs)
        generated += [Graph(a, np.ones((len(a), 1)), label) for a in adjs]
    deg = mmd([graph_statistics(g).degree_hist for g in generated],
              [graph_statistics(g).degree_hist for g in gs])
    return FidelityResult(correct, samples, deg, time.perf_counter() - start)
