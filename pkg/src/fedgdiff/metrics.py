"""Generative-quality and heterogeneity measures for graph collections."""

from __future__ import annotations

import itertools
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .graphs import Graph, GraphSet

# 4-node graphlet orbits in the usual 0..14 numbering (0-3 cover 2- and 3-node graphlets).
# Each entry maps a sorted induced-degree sequence to {degree: orbit}.
_FOUR_NODE_ORBITS = {
    (1, 1, 2, 2): {1: 4, 2: 5},  # path P4: ends, middles
    (1, 1, 1, 3): {1: 6, 3: 7},  # star: leaves, centre
    (2, 2, 2, 2): {2: 8},  # cycle C4
    (1, 2, 2, 3): {1: 9, 2: 10, 3: 11},  # paw: tail, triangle rim, hub
    (2, 2, 3, 3): {2: 12, 3: 13},  # diamond: rim, chord ends
    (3, 3, 3, 3): {3: 14},  # K4
}
ORBIT_IDS = tuple(range(4, 15))


@dataclass
class GraphStats:
    degree_hist: np.ndarray
    clustering_hist: np.ndarray
    orbit_hist: np.ndarray
    orbit_counts: np.ndarray  # (n, 11) per-node counts for orbits 4..14
    edgeless: bool = False


def clustering_coefficients(adjacency: np.ndarray) -> np.ndarray:
    a = np.asarray(adjacency, dtype=np.int64)
    deg = a.sum(axis=1)
    tri = np.diag(a @ a @ a) / 2
    out = np.zeros(len(a))
    ok = deg >= 2
    out[ok] = 2 * tri[ok] / (deg[ok] * (deg[ok] - 1))
    return out


def _connected_quads(adjacency: np.ndarray):
    """Yield every connected 4-node vertex set once (ESU-style extension from its smallest node)."""
    nbrs = [set(np.nonzero(row)[0].tolist()) for row in adjacency]

    def extend(sub, ext, root):
        if len(sub) == 4:
            yield tuple(sub)
            return
        ext = set(ext)
        while ext:
            w = ext.pop()
            excl = set().union(*(nbrs[u] for u in sub)) | set(sub)
            new_ext = ext | {u for u in nbrs[w] if u > root and u not in excl}
            yield from extend(sub + [w], new_ext, root)

    for v in range(len(adjacency)):
        yield from extend([v], {u for u in nbrs[v] if u > v}, v)


def orbit_counts(adjacency: np.ndarray) -> np.ndarray:
    """Per-node counts of 4-node graphlet orbits 4..14 as an ``(n, 11)`` integer array."""
    a = np.asarray(adjacency, dtype=np.int64)
    counts = np.zeros((len(a), len(ORBIT_IDS)), dtype=np.int64)
    for quad in _connected_quads(a):
        idx = np.array(quad)
        sub_deg = a[np.ix_(idx, idx)].sum(axis=1)
        table = _FOUR_NODE_ORBITS[tuple(sorted(sub_deg.tolist()))]
        for node, d in zip(quad, sub_deg):
            counts[node, table[int(d)] - 4] += 1
    return counts


def _normalized(hist: np.ndarray) -> np.ndarray:
    total = hist.sum()
    return hist / total if total > 0 else hist.astype(np.float64)


def graph_statistics(g: Graph, clustering_bins: int = 100) -> GraphStats:
    a = g.adjacency
    deg = g.degrees()
    degree_hist = _normalized(np.bincount(deg).astype(np.float64))
    clus = clustering_coefficients(a)
    clustering_hist, _ = np.histogram(clus, bins=clustering_bins, range=(0.0, 1.0))
    orbits = orbit_counts(a)
    return GraphStats(
        degree_hist=degree_hist,
        clustering_hist=_normalized(clustering_hist.astype(np.float64)),
        orbit_hist=_normalized(orbits.sum(axis=0).astype(np.float64)),
        orbit_counts=orbits,
        edgeless=g.edge_count == 0,
    )


def _pad_stack(hists) -> np.ndarray:
    width = max(len(h) for h in hists)
    return np.stack([np.pad(np.asarray(h, dtype=np.float64), (0, width - len(h))) for h in hists])


def _w1_matrix(x: np.ndarray, y: np.ndarray, bin_width: float) -> np.ndarray:
    cx, cy = np.cumsum(x, axis=1), np.cumsum(y, axis=1)
    return np.abs(cx[:, None, :] - cy[None, :, :]).sum(axis=2) * bin_width


def mmd(sample_a, sample_b, sigma: float = 1.0, bin_width: float = 1.0) -> float:
    """Biased MMD between two lists of histograms with a Gaussian kernel on 1-D earth mover's distance.

    ``k(p, q) = exp(-W1(p, q)^2 / (2 sigma^2))``. Returns ``sqrt(MMD^2)``.
    """
    if len(sample_a) == 0 or len(sample_b) == 0:
        raise ValueError("MMD needs two non-empty samples")
    both = _pad_stack(list(sample_a) + list(sample_b))
    x, y = both[: len(sample_a)], both[len(sample_a) :]

    def k(p, q):
        return np.exp(-(_w1_matrix(p, q, bin_width) ** 2) / (2 * sigma**2))

    value = k(x, x).mean() + k(y, y).mean() - 2 * k(x, y).mean()
    return float(np.sqrt(max(value, 0.0)))


def generation_quality(generated: list[Graph], reference: list[Graph], sigma: float = 1.0) -> dict:
    """Degree / clustering / orbit MMD between generated and reference graphs."""
    gen = [graph_statistics(g) for g in generated]
    ref = [graph_statistics(g) for g in reference]
    out = {
        "degree": mmd([s.degree_hist for s in gen], [s.degree_hist for s in ref], sigma),
        "clustering": mmd([s.clustering_hist for s in gen], [s.clustering_hist for s in ref], sigma,
                          bin_width=1.0 / len(gen[0].clustering_hist)),
        "orbit": mmd([s.orbit_hist for s in gen], [s.orbit_hist for s in ref], sigma),
    }
    out["average"] = float(np.mean(list(out.values())))
    return out


@dataclass
class AWEmbedding:
    length: int
    probs: dict = field(default_factory=dict)  # anonymized walk tuple -> probability

    def vector(self, patterns) -> np.ndarray:
        return np.array([self.probs.get(p, 0.0) for p in patterns])


def anonymous_walk_embedding(g: Graph, length: int = 7) -> AWEmbedding:
    """Exact distribution of anonymous walks with ``length`` steps.

    Walks start uniformly at nodes of non-zero degree and move to a uniform
    random neighbour. A walk is anonymized by replacing each node with the
    index of its first occurrence.
    """
    if length < 1:
        raise ValueError("walk length must be >= 1")
    nbrs = [np.nonzero(row)[0].tolist() for row in g.adjacency]
    starts = [v for v in range(g.node_count) if nbrs[v]]
    if not starts:
        raise ValueError("anonymous walks need a graph with at least one edge")
    probs: dict[tuple, float] = defaultdict(float)

    # frontier entries: (current node, first-seen map, pattern, probability)
    frontier = [(v, {v: 0}, (0,), 1.0 / len(starts)) for v in starts]
    for _ in range(length):
        nxt = []
        for node, seen, pattern, p in frontier:
            step = p / len(nbrs[node])
            for u in nbrs[node]:
                if u in seen:
                    nxt.append((u, seen, pattern + (seen[u],), step))
                else:
                    s2 = dict(seen)
                    s2[u] = len(seen)
                    nxt.append((u, s2, pattern + (s2[u],), step))
        frontier = nxt
    for _, _, pattern, p in frontier:
        probs[pattern] += p
    return AWEmbedding(length, dict(probs))


def js_distance(p, q) -> float:
    """Jensen-Shannon distance with base-2 logs; accepts arrays or ``{key: prob}`` dicts."""
    if isinstance(p, dict) or isinstance(q, dict):
        keys = sorted(set(p) | set(q))
        p = np.array([p.get(k, 0.0) for k in keys])
        q = np.array([q.get(k, 0.0) for k in keys])
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    for v in (p, q):
        if v.shape != p.shape or np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
            raise ValueError("js_distance needs two aligned probability vectors")
    s = p + q  # a / m written as 2a / (p + q) so subnormal entries cannot make m underflow to 0

    def kl(a):
        nz = a > 0
        return float(np.sum(a[nz] * np.log2(2 * a[nz] / s[nz])))

    return float(np.sqrt(max(0.5 * kl(p) + 0.5 * kl(q), 0.0)))


def edge_feature_similarity_hist(g: Graph, bins: int = 20) -> np.ndarray | None:
    """Histogram of cosine similarities between the feature rows at either end of each edge."""
    u, v = np.nonzero(np.triu(g.adjacency, 1))
    if len(u) == 0:
        return None
    f = g.features.astype(np.float64)
    norms = np.linalg.norm(f, axis=1)
    denom = norms[u] * norms[v]
    sims = np.where(denom > 0, (f[u] * f[v]).sum(axis=1) / np.where(denom > 0, denom, 1.0), 0.0)
    hist, _ = np.histogram(np.clip(sims, -1.0, 1.0), bins=bins, range=(-1.0, 1.0))
    return hist / hist.sum()


@dataclass
class HeterogeneityReport:
    structure_mean: float
    structure_std: float
    feature_mean: float
    feature_std: float
    structure_pairs: np.ndarray
    feature_pairs: np.ndarray

    def as_dict(self) -> dict:
        return {
            "structure_mean": self.structure_mean,
            "structure_std": self.structure_std,
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
            "structure_pairs": np.round(self.structure_pairs, 12).tolist(),
            "feature_pairs": np.round(self.feature_pairs, 12).tolist(),
        }


def _embed_walks(gs: GraphSet, length: int):
    return [anonymous_walk_embedding(g, length) for g in gs if g.edge_count > 0]


def _as_matrix(dists: list[dict], keys: list) -> np.ndarray:
    index = {k: i for i, k in enumerate(keys)}
    out = np.zeros((len(dists), len(keys)))
    for r, d in enumerate(dists):
        for k, p in d.items():
            out[r, index[k]] = p
    return out


def pairwise_js(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """JS distances between every row of ``p`` and every row of ``q`` (same column support)."""
    s = p[:, None, :] + q[None, :, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        kp = np.where(p[:, None, :] > 0, p[:, None, :] * np.log2(2 * p[:, None, :] / s), 0.0).sum(-1)
        kq = np.where(q[None, :, :] > 0, q[None, :, :] * np.log2(2 * q[None, :, :] / s), 0.0).sum(-1)
    return np.sqrt(np.clip(0.5 * kp + 0.5 * kq, 0.0, None))


def heterogeneity_report(clients: list[GraphSet], awe_length: int = 7, feature_bins: int = 20):
    """Mean/std over client pairs of the average cross-client JS distance.

    Structure uses anonymous-walk distributions per graph, features use the
    per-graph histogram of edge-endpoint feature cosine similarities.
    Edgeless graphs are skipped.
    """
    if len(clients) < 2:
        raise ValueError("heterogeneity needs at least two clients")
    walks = [[e.probs for e in _embed_walks(gs, awe_length)] for gs in clients]
    keys = sorted({k for client in walks for d in client for k in d})
    walk_mats = [_as_matrix(w, keys) for w in walks]
    feat_mats = []
    for gs in clients:
        hists = [h for h in (edge_feature_similarity_hist(g, feature_bins) for g in gs) if h is not None]
        feat_mats.append(np.array(hists))
    n = len(clients)
    struct = np.zeros((n, n))
    feat = np.zeros((n, n))
    pairs_s, pairs_f = [], []
    for i, j in itertools.combinations(range(n), 2):
        struct[i, j] = struct[j, i] = pairwise_js(walk_mats[i], walk_mats[j]).mean()
        feat[i, j] = feat[j, i] = pairwise_js(feat_mats[i], feat_mats[j]).mean()
        pairs_s.append(struct[i, j])
        pairs_f.append(feat[i, j])
    return HeterogeneityReport(
        float(np.mean(pairs_s)), float(np.std(pairs_s)),
        float(np.mean(pairs_f)), float(np.std(pairs_f)),
        struct, feat,
    )
