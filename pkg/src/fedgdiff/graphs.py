"""Graph containers, TUDataset ingestion, degree features, partitioning and splits."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np


class IngestionError(FileNotFoundError):
    """A required dataset file is missing."""


class DatasetFormatError(ValueError):
    """A dataset file is malformed."""


class ConfigurationError(ValueError):
    """A request cannot be satisfied with the given data or settings."""


@dataclass
class Graph:
    adjacency: np.ndarray
    features: np.ndarray
    label: int
    origin: str = ""

    def __post_init__(self):
        self.adjacency = np.asarray(self.adjacency, dtype=np.uint8)
        self.features = np.asarray(self.features, dtype=np.float32)
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
            raise ValueError(f"adjacency must be a non-empty square matrix, got {a.shape}")
        if a.max(initial=0) > 1:
            raise ValueError("adjacency must be binary")
        if not np.array_equal(a, a.T):
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a)):
            raise ValueError("adjacency must have a zero diagonal")
        if self.features.ndim != 2 or self.features.shape[0] != a.shape[0]:
            raise ValueError(
                f"features must have one row per node ({a.shape[0]}), got {self.features.shape}"
            )
        self.label = int(self.label)

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edge_count(self) -> int:
        return int(self.adjacency.sum()) // 2

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def degrees(self) -> np.ndarray:
        return self.adjacency.sum(axis=1).astype(np.int64)

    def permuted(self, perm) -> "Graph":
        perm = np.asarray(perm)
        return Graph(
            self.adjacency[np.ix_(perm, perm)], self.features[perm], self.label, self.origin
        )


@dataclass
class GraphSet:
    graphs: list[Graph]
    num_classes: int
    feature_dim: int
    name: str = ""
    # "node-labels", "degree", or "none"; decides how synthetic graphs get features
    feature_kind: str = "node-labels"
    max_degree: int | None = None

    def __post_init__(self):
        for g in self.graphs:
            if g.feature_dim != self.feature_dim:
                raise ValueError(
                    f"graph feature dim {g.feature_dim} != set feature dim {self.feature_dim}"
                )
            if not 0 <= g.label < self.num_classes:
                raise ValueError(f"label {g.label} outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.graphs)

    def __iter__(self):
        return iter(self.graphs)

    def __getitem__(self, i):
        return self.graphs[i]

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def subset(self, indices, name: str | None = None) -> "GraphSet":
        return replace(self, graphs=[self.graphs[i] for i in indices], name=name or self.name)

    def with_graphs(self, graphs: list[Graph], name: str | None = None) -> "GraphSet":
        return replace(self, graphs=list(graphs), name=name or self.name)


@dataclass
class PartitionSpec:
    mode: str = "single-dataset"
    num_clients: int = 3
    assignment: dict[int, str] = field(default_factory=dict)
    seed: int = 0

    MODES = ("single-dataset", "across-dataset", "across-domain")

    def validate(self, dataset_names: list[str]) -> None:
        if self.mode not in self.MODES:
            raise ConfigurationError(f"unknown partition mode {self.mode!r}")
        if self.num_clients < 2:
            raise ConfigurationError("partitioning needs at least 2 clients")
        if self.mode == "single-dataset":
            if len(dataset_names) != 1:
                raise ConfigurationError("single-dataset mode needs exactly one dataset")
            return
        missing = [c for c in range(self.num_clients) if c not in self.assignment]
        if missing:
            raise ConfigurationError(f"clients {missing} have no dataset assignment")
        unknown = {d for d in self.assignment.values() if d not in dataset_names}
        if unknown:
            raise ConfigurationError(f"assignment names unknown datasets {sorted(unknown)}")
        unused = [d for d in dataset_names if d not in self.assignment.values()]
        if unused:
            raise ConfigurationError(f"datasets {unused} are not assigned to any client")


def _read_lines(path: Path) -> list[str]:
    if not path.is_file():
        raise IngestionError(f"missing dataset file: {path}")
    return [line.strip() for line in path.read_text().splitlines()]


def _read_ints(path: Path) -> list[int]:
    out = []
    for lineno, line in enumerate(_read_lines(path), start=1):
        if not line:
            continue
        try:
            out.append(int(line.split(",")[0]))
        except ValueError:
            raise DatasetFormatError(f"{path.name}:{lineno}: expected an integer, got {line!r}")
    return out


def load_tu_dataset(directory, name: str) -> GraphSet:
    """Read a dataset in the TUDataset text layout.

    Node labels, when present, become one-hot features; otherwise every node
    gets a single constant feature and ``one_hot_degree_features`` should be
    applied. Graph labels are remapped to ``0..K-1`` in sorted order.
    """
    directory = Path(directory)
    indicator = _read_ints(directory / f"{name}_graph_indicator.txt")
    graph_labels = _read_ints(directory / f"{name}_graph_labels.txt")
    edge_lines = _read_lines(directory / f"{name}_A.txt")
    node_label_path = directory / f"{name}_node_labels.txt"
    node_labels = _read_ints(node_label_path) if node_label_path.is_file() else None

    if not indicator:
        raise DatasetFormatError(f"{name}_graph_indicator.txt is empty")
    ids = sorted(set(indicator))
    if ids != list(range(1, len(ids) + 1)):
        raise DatasetFormatError(
            f"{name}_graph_indicator.txt: graph ids must be contiguous from 1, got gaps"
        )
    for lineno in range(1, len(indicator)):
        if indicator[lineno] < indicator[lineno - 1]:
            raise DatasetFormatError(
                f"{name}_graph_indicator.txt:{lineno + 1}: graph ids must be non-decreasing"
            )
    if len(graph_labels) != len(ids):
        raise DatasetFormatError(
            f"{name}_graph_labels.txt has {len(graph_labels)} labels for {len(ids)} graphs"
        )
    if node_labels is not None and len(node_labels) != len(indicator):
        raise DatasetFormatError(
            f"{name}_node_labels.txt has {len(node_labels)} rows for {len(indicator)} nodes"
        )

    graph_of = np.asarray(indicator, dtype=np.int64) - 1
    sizes = np.bincount(graph_of, minlength=len(ids))
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    adjs = [np.zeros((s, s), dtype=np.uint8) for s in sizes]
    for lineno, line in enumerate(edge_lines, start=1):
        if not line:
            continue
        try:
            u, v = (int(tok) - 1 for tok in line.split(","))
        except ValueError:
            raise DatasetFormatError(f"{name}_A.txt:{lineno}: expected 'u, v', got {line!r}")
        if not (0 <= u < len(indicator) and 0 <= v < len(indicator)):
            raise DatasetFormatError(f"{name}_A.txt:{lineno}: node id out of range")
        gu, gv = graph_of[u], graph_of[v]
        if gu != gv:
            raise DatasetFormatError(
                f"{name}_A.txt:{lineno}: edge ({u + 1}, {v + 1}) joins graphs {gu + 1} and {gv + 1}"
            )
        if u == v:
            continue
        a = adjs[gu]
        iu, iv = u - offsets[gu], v - offsets[gu]
        a[iu, iv] = a[iv, iu] = 1

    label_values = sorted(set(graph_labels))
    label_index = {y: i for i, y in enumerate(label_values)}
    if node_labels is not None:
        node_values = sorted(set(node_labels))
        node_index = np.array([node_values.index(x) for x in node_labels])
        feats = np.eye(len(node_values), dtype=np.float32)[node_index]
        kind = "node-labels"
    else:
        feats = np.ones((len(indicator), 1), dtype=np.float32)
        kind = "none"

    graphs = [
        Graph(adjs[i], feats[offsets[i] : offsets[i] + sizes[i]], label_index[graph_labels[i]], name)
        for i in range(len(ids))
    ]
    return GraphSet(graphs, len(label_values), feats.shape[1], name, feature_kind=kind)


def degree_one_hot(adjacency: np.ndarray, max_degree: int) -> np.ndarray:
    deg = np.minimum(np.asarray(adjacency).sum(axis=1).astype(np.int64), max_degree)
    return np.eye(max_degree + 1, dtype=np.float32)[deg]


def one_hot_degree_features(gs: GraphSet, max_degree: int) -> GraphSet:
    if max_degree < 1:
        raise ValueError("max_degree must be >= 1")
    graphs = [
        Graph(g.adjacency, degree_one_hot(g.adjacency, max_degree), g.label, g.origin) for g in gs
    ]
    return replace(
        gs, graphs=graphs, feature_dim=max_degree + 1, feature_kind="degree", max_degree=max_degree
    )


def pad_features(gs: GraphSet, feature_dim: int, num_classes: int | None = None) -> GraphSet:
    """Zero-pad node features (and widen the class range) so sets can share one classifier."""
    if feature_dim < gs.feature_dim:
        raise ValueError("cannot shrink feature dimension")
    extra = feature_dim - gs.feature_dim
    graphs = [
        Graph(g.adjacency, np.pad(g.features, ((0, 0), (0, extra))), g.label, g.origin)
        for g in gs
    ]
    return replace(
        gs, graphs=graphs, feature_dim=feature_dim, num_classes=num_classes or gs.num_classes
    )


def _balanced_chunks(items: list, parts: int) -> list[list]:
    sizes = np.full(parts, len(items) // parts)
    sizes[: len(items) % parts] += 1
    out, start = [], 0
    for s in sizes:
        out.append(items[start : start + s])
        start += s
    return out


def partition_clients(datasets: list[GraphSet], spec: PartitionSpec) -> list[GraphSet]:
    """Distribute the global training graphs over ``spec.num_clients`` clients.

    Single-dataset mode shuffles once and deals out near-equal shares. The
    across-* modes give every client graphs from its assigned dataset only; a
    dataset shared by several clients is shuffled and split evenly among them.
    """
    names = [d.name for d in datasets]
    spec.validate(names)
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "single-dataset":
        gs = datasets[0]
        if spec.num_clients > len(gs):
            raise ConfigurationError(
                f"{spec.num_clients} clients but only {len(gs)} graphs in {gs.name}"
            )
        order = list(rng.permutation(len(gs)))
        return [
            gs.subset(chunk, name=f"{gs.name}/client{c}")
            for c, chunk in enumerate(_balanced_chunks(order, spec.num_clients))
        ]

    by_name = {d.name: d for d in datasets}
    parts: dict[int, GraphSet] = {}
    for dname in names:
        gs = by_name[dname]
        owners = sorted(c for c, d in spec.assignment.items() if d == dname)
        if len(owners) > len(gs):
            raise ConfigurationError(f"{len(owners)} clients share {len(gs)} graphs of {dname}")
        order = list(rng.permutation(len(gs)))
        for c, chunk in zip(owners, _balanced_chunks(order, len(owners))):
            parts[c] = gs.subset(chunk, name=f"{dname}/client{c}")
    return [parts[c] for c in range(spec.num_clients)]


def split_graphs(gs: GraphSet, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Seeded shuffle then contiguous cut into (train, validate, test).

    Validation and test sizes are floor allocations; the remainder goes to train.
    """
    if len(gs) == 0:
        raise ValueError("cannot split an empty graph set")
    if len(ratios) != 3 or min(ratios) < 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative fractions summing to 1, got {ratios}")
    n = len(gs)
    n_val = int(np.floor(ratios[1] * n + 1e-9))
    n_test = int(np.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    return (
        gs.subset(order[:n_train], name=f"{gs.name}/train"),
        gs.subset(order[n_train : n_train + n_val], name=f"{gs.name}/val"),
        gs.subset(order[n_train + n_val :], name=f"{gs.name}/test"),
    )


def summarize(gs: GraphSet) -> dict:
    nodes = np.array([g.node_count for g in gs], dtype=float)
    edges = np.array([g.edge_count for g in gs], dtype=float)
    return {
        "name": gs.name,
        "graphs": len(gs),
        "classes": gs.num_classes,
        "feature_dim": gs.feature_dim,
        "avg_nodes": float(nodes.mean()) if len(gs) else 0.0,
        "avg_edges": float(edges.mean()) if len(gs) else 0.0,
        "label_counts": dict(sorted(Counter(int(g.label) for g in gs).items())),
    }
