"""Score-based graph diffusion over adjacency matrices.

Two model variants are supported:

* ``basic``: one score network per locally present class, all sharing a fixed
  noise ladder.
* ``advanced``: a single score network plus a label embedding that maps each
  class to its own (learned, positive) noise ladder.

Adjacency batches are dense ``(B, n, n)`` tensors padded to the largest graph
with a ``(B, n)`` node mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .graphs import Graph, GraphSet, degree_one_hot
from .nn import AdamState, adam_step, init_module, param_store, seeded

DEFAULT_SIGMAS = (1.6, 0.8, 0.6, 0.4, 0.2, 0.1)


class DomainError(ValueError):
    pass


class UnavailableLabelError(KeyError):
    pass


@dataclass
class DiffusionConfig:
    depth: int = 4
    channels: int = 8
    hidden: int = 16
    sigmas: tuple = DEFAULT_SIGMAS
    epochs: int = 300
    lr: float = 5e-3
    batch_size: int = 32
    # the embedding gets a damped learning rate; see ``train_diffusion``
    embedding_lr_scale: float = 0.1


@dataclass
class SamplerConfig:
    steps_per_level: int = 32
    step_size: float = 2e-3
    threshold: float = 0.5
    max_attempts: int = 10
    final_half_step: bool = True

    def __post_init__(self):
        if self.steps_per_level < 1:
            raise ValueError("steps_per_level must be >= 1")
        if self.step_size < 0:
            raise ValueError("step_size must be non-negative")


def edge_mask(mask: torch.Tensor) -> torch.Tensor:
    n = mask.shape[-1]
    off = 1.0 - torch.eye(n, dtype=mask.dtype)
    return mask[:, :, None] * mask[:, None, :] * off


def batch_adjacency(graphs, dtype=torch.float32):
    """Pad adjacency matrices into ``(adj, mask)`` tensors."""
    n = max(g.node_count if isinstance(g, Graph) else len(g) for g in graphs)
    adj = torch.zeros(len(graphs), n, n, dtype=dtype)
    mask = torch.zeros(len(graphs), n, dtype=dtype)
    for b, g in enumerate(graphs):
        a = g.adjacency if isinstance(g, Graph) else g
        k = a.shape[0]
        adj[b, :k, :k] = torch.as_tensor(np.asarray(a), dtype=dtype)
        mask[b, :k] = 1.0
    return adj, mask


def symmetric_noise(shape, mask: torch.Tensor, generator=None) -> torch.Tensor:
    """Standard normal noise on the strict upper triangle, mirrored; zero diagonal and padding."""
    z = torch.randn(*shape, generator=generator, dtype=mask.dtype)
    z = torch.triu(z, diagonal=1)
    z = z + z.transpose(-1, -2)
    em = edge_mask(mask)
    while em.dim() < z.dim():
        em = em.unsqueeze(1)
    return z * em


class ScoreNetwork(nn.Module):
    """Permutation-equivariant edge-channel network estimating the adjacency score.

    Each layer builds, for every node pair ``(i, j)``, the current channels
    ``e_ij``, the symmetric row summaries ``r_i + r_j`` and ``r_i * r_j``
    (``r_i`` = mean of row ``i``) and the two-hop term ``mean_k e_ik e_kj``,
    then mixes them through a two-layer MLP whose hidden units get a per-level
    gain and bias (shifted linearly in ``log sigma``). The head reads all
    layers' channels and divides by ``sigma``.
    """

    def __init__(self, depth: int = 4, channels: int = 8, hidden: int = 16, num_levels: int = 6):
        super().__init__()
        self.depth, self.channels, self.hidden, self.num_levels = depth, channels, hidden, num_levels
        self.mix_in = nn.ModuleList()
        self.mix_out = nn.ModuleList()
        c_in = 1
        for _ in range(depth):
            self.mix_in.append(nn.Linear(4 * c_in, hidden))
            self.mix_out.append(nn.Linear(hidden, channels))
            c_in = channels
        self.gain = nn.Parameter(torch.ones(depth, num_levels, hidden))
        self.bias = nn.Parameter(torch.zeros(depth, num_levels, hidden))
        self.gain_slope = nn.Parameter(torch.zeros(depth, hidden))
        self.bias_slope = nn.Parameter(torch.zeros(depth, hidden))
        self.head_in = nn.Linear(1 + depth * channels, hidden)
        self.head_out = nn.Linear(hidden, 1)

    def forward(self, adj, mask, sigma, level):
        em = edge_mask(mask)
        count = mask.sum(dim=1).clamp(min=1.0)[:, None, None]
        log_sigma = torch.log(sigma)[:, None]
        x = (adj * em).unsqueeze(-1)
        feats = [x]
        for layer in range(self.depth):
            r = x.sum(dim=2) / count
            pair_sum = r[:, :, None, :] + r[:, None, :, :]
            pair_prod = r[:, :, None, :] * r[:, None, :, :]
            two_hop = torch.einsum("bikc,bkjc->bijc", x, x) / count[..., None]
            z = self.mix_in[layer](torch.cat([x, pair_sum, pair_prod, two_hop], dim=-1))
            g = self.gain[layer][level] + self.gain_slope[layer] * log_sigma
            b = self.bias[layer][level] + self.bias_slope[layer] * log_sigma
            z = nn.functional.silu(z * g[:, None, None, :] + b[:, None, None, :])
            x = self.mix_out[layer](z) * em.unsqueeze(-1)
            feats.append(x)
        h = nn.functional.silu(self.head_in(torch.cat(feats, dim=-1)))
        out = self.head_out(h).squeeze(-1)
        out = 0.5 * (out + out.transpose(1, 2)) * em
        return out / sigma[:, None, None]

    def architecture(self) -> dict:
        return {
            "depth": self.depth,
            "channels": self.channels,
            "hidden": self.hidden,
            "num_levels": self.num_levels,
        }


class LabelNoiseEmbedding(nn.Module):
    """Class label -> positive noise ladder (exp of a learned table)."""

    def __init__(self, num_classes: int, sigmas=DEFAULT_SIGMAS):
        super().__init__()
        ladder = torch.log(torch.as_tensor(sigmas, dtype=torch.float32))
        self.raw = nn.Parameter(ladder.repeat(num_classes, 1))

    @property
    def num_classes(self) -> int:
        return self.raw.shape[0]

    @property
    def num_levels(self) -> int:
        return self.raw.shape[1]

    def forward(self, labels) -> torch.Tensor:
        labels = torch.as_tensor(labels, dtype=torch.long)
        if labels.numel() and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DomainError(f"label outside [0, {self.num_classes})")
        return torch.exp(self.raw[labels])


def label_noise_vector(emb: LabelNoiseEmbedding, k: int) -> torch.Tensor:
    if not 0 <= k < emb.num_classes:
        raise DomainError(f"label {k} outside [0, {emb.num_classes})")
    return emb(torch.tensor([k]))[0]


def perturb_adjacency(adjacency, sigma: float, generator=None, noise=None) -> np.ndarray:
    """``A + sigma * z`` on the strict upper triangle, mirrored, zero diagonal."""
    if sigma <= 0:
        raise DomainError("sigma must be positive")
    a = torch.as_tensor(np.asarray(adjacency), dtype=torch.float64)[None]
    mask = torch.ones(1, a.shape[-1], dtype=torch.float64)
    if noise is None:
        noise = symmetric_noise(a.shape, mask, generator)
    else:
        noise = torch.as_tensor(np.asarray(noise), dtype=torch.float64).reshape(a.shape)
        noise = torch.triu(noise, 1)
        noise = noise + noise.transpose(-1, -2)
    return (a + sigma * noise)[0].numpy()


def dsm_loss(score_fn, adj, mask, noise, sigmas, num_classes: int = 1) -> torch.Tensor:
    """Denoising score-matching loss over a padded batch.

    ``noise`` has shape ``(B, L, n, n)`` (standard normal, symmetric) and
    ``sigmas`` shape ``(B, L)``: the noise ladder applicable to each graph (the
    fixed schedule for the basic loss, ``emb(label)`` for the labeled one).
    Returns ``1/(2 L K) * mean_b sum_l sigma^2 ||s(A_hat) - (A - A_hat)/sigma^2||^2``
    with ``K = num_classes``; ``K = 1`` gives the unlabeled loss. The target is
    the gradient of ``log q(A_hat | A)``, which points from ``A_hat`` back to
    ``A``; the Langevin sampler ascends along the network output.
    """
    bsz, levels = sigmas.shape
    n = adj.shape[-1]
    flat_sig = sigmas.reshape(-1)
    a = adj[:, None].expand(bsz, levels, n, n).reshape(-1, n, n)
    z = noise.reshape(-1, n, n)
    m = mask[:, None].expand(bsz, levels, n).reshape(-1, n)
    perturbed = a + flat_sig[:, None, None] * z
    level = torch.arange(levels).repeat(bsz)
    score = score_fn(perturbed, m, flat_sig, level)
    target = (a - perturbed) / flat_sig[:, None, None] ** 2
    per = flat_sig**2 * ((score - target) ** 2).sum(dim=(1, 2))
    return per.reshape(bsz, levels).sum(dim=1).mean() / (2.0 * levels * num_classes)


@dataclass
class DiffusionModel:
    variant: str
    num_classes: int
    sigmas: torch.Tensor  # base ladder (basic: the schedule; advanced: the init ladder)
    networks: dict = field(default_factory=dict)  # label -> ScoreNetwork (basic) or {0: net}
    embedding: LabelNoiseEmbedding | None = None
    node_counts: dict = field(default_factory=dict)  # label -> histogram over node counts
    loss_trace: list = field(default_factory=list)

    def labels(self) -> list[int]:
        if self.variant == "basic":
            return sorted(self.networks)
        return sorted(k for k, h in self.node_counts.items() if np.sum(h) > 0)

    def network_for(self, k: int) -> ScoreNetwork:
        if self.variant == "basic":
            if k not in self.networks:
                raise UnavailableLabelError(f"no basic model for label {k}")
            return self.networks[k]
        if not 0 <= k < self.num_classes:
            raise UnavailableLabelError(f"label {k} outside [0, {self.num_classes})")
        return self.networks[0]

    def ladder_for(self, k: int) -> torch.Tensor:
        if self.variant == "basic":
            return self.sigmas
        return label_noise_vector(self.embedding, k).detach()

    def parameters(self) -> dict[str, torch.Tensor]:
        """Every learned tensor, in a fixed order, keyed by wire name."""
        out = {}
        if self.variant == "basic":
            for k in sorted(self.networks):
                for name, p in param_store(self.networks[k]).items():
                    out[f"label{k}.{name}"] = p
        else:
            for name, p in param_store(self.networks[0]).items():
                out[f"net.{name}"] = p
            out["emb.raw"] = self.embedding.raw
        return out

    def architecture(self) -> dict:
        net = next(iter(self.networks.values()))
        return net.architecture()


def node_count_histogram(graphs) -> np.ndarray:
    counts = np.bincount([g.node_count for g in graphs])
    return counts.astype(np.float64)


def _fit(params, loss_of_batch, graphs, cfg: DiffusionConfig, gen, rng, lr_scale=None):
    state = AdamState(lr=cfg.lr)
    extra = {}
    if lr_scale:
        extra = {name: AdamState(lr=cfg.lr * s) for name, s in lr_scale.items()}
    main = {k: v for k, v in params.items() if k not in extra}
    trace = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(graphs))
        total, seen = 0.0, 0
        for start in range(0, len(graphs), cfg.batch_size):
            batch = [graphs[i] for i in order[start : start + cfg.batch_size]]
            loss = loss_of_batch(batch, gen)
            grads = torch.autograd.grad(loss, list(params.values()))
            grads = dict(zip(params, grads))
            adam_step(main, grads, state)
            for name, st in extra.items():
                adam_step({name: params[name]}, grads, st)
            total += loss.item() * len(batch)
            seen += len(batch)
        trace.append(total / seen)
    return trace


def train_diffusion(local_graphs: GraphSet, variant: str, cfg: DiffusionConfig, seed: int) -> DiffusionModel:
    """Fit a diffusion model to a client's local graphs.

    Each epoch reshuffles, draws one fresh perturbation per graph per level,
    and takes Adam steps on minibatches. The advanced variant's noise table
    uses ``lr * embedding_lr_scale``: left at the full rate the loss can be
    driven down by inflating the ladder, which flattens the learned score.
    """
    if len(local_graphs) == 0:
        raise ValueError("cannot train a diffusion model on an empty graph set")
    if variant not in ("basic", "advanced"):
        raise ValueError(f"unknown variant {variant!r}")
    sigmas = torch.as_tensor(cfg.sigmas, dtype=torch.float32)
    levels = len(cfg.sigmas)
    rng = np.random.default_rng(seed)
    gen = seeded(seed)
    model = DiffusionModel(variant, local_graphs.num_classes, sigmas)
    for k in range(local_graphs.num_classes):
        group = [g for g in local_graphs if g.label == k]
        if group:
            model.node_counts[k] = node_count_histogram(group)

    def make_net():
        return ScoreNetwork(cfg.depth, cfg.channels, cfg.hidden, levels)

    if variant == "basic":
        for k in sorted(model.node_counts):
            group = [g for g in local_graphs if g.label == k]
            net = init_module(make_net, seed * 1_000_003 + k)
            params = param_store(net)

            def loss_fn(batch, gen, net=net):
                adj, mask = batch_adjacency(batch)
                noise = symmetric_noise((len(batch), levels, *adj.shape[1:]), mask, gen)
                return dsm_loss(net, adj, mask, noise, sigmas.expand(len(batch), levels))

            trace = _fit(params, loss_fn, group, cfg, gen, rng)
            model.networks[k] = net
            model.loss_trace.append(trace)
        return model

    net = init_module(make_net, seed)
    emb = LabelNoiseEmbedding(local_graphs.num_classes, cfg.sigmas)
    model.networks[0], model.embedding = net, emb
    params = {**{f"net.{k}": v for k, v in param_store(net).items()}, "emb.raw": emb.raw}

    def loss_fn(batch, gen):
        adj, mask = batch_adjacency(batch)
        noise = symmetric_noise((len(batch), levels, *adj.shape[1:]), mask, gen)
        labels = torch.tensor([g.label for g in batch])
        return dsm_loss(net, adj, mask, noise, emb(labels), emb.num_classes)

    graphs = list(local_graphs)
    model.loss_trace.append(
        _fit(params, loss_fn, graphs, cfg, gen, rng, lr_scale={"emb.raw": cfg.embedding_lr_scale})
    )
    return model


def init_adjacency(n: int, generator=None) -> torch.Tensor:
    """Folded-normal initial matrix: ``|z|`` on the upper triangle, mirrored, zero diagonal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = torch.randn(n, n, generator=generator).abs()
    z = torch.triu(z, 1)
    return z + z.T


@torch.no_grad()
def annealed_langevin(net, ladder: torch.Tensor, sizes: list[int], cfg: SamplerConfig, generator,
                      trajectory: list | None = None) -> list[np.ndarray]:
    """Run annealed Langevin dynamics for a batch of graphs with the given node counts.

    Levels are visited from the largest to the smallest noise scale; at each
    one ``T`` steps of ``A <- A + (a/2) s(A, sigma) + sqrt(a) z`` with
    ``a = eps * sigma^2 / sigma_min^2`` are taken, followed by an optional
    noise-free drift step. The iterate is re-projected to symmetric with zero
    diagonal after every update.
    """
    n = max(sizes)
    mask = torch.zeros(len(sizes), n)
    x = torch.zeros(len(sizes), n, n)
    for b, k in enumerate(sizes):
        mask[b, :k] = 1.0
        x[b, :k, :k] = init_adjacency(k, generator)
    em = edge_mask(mask)
    ladder = ladder.detach().float()
    order = torch.argsort(ladder, descending=True)
    sigma_min = ladder.min()
    if trajectory is not None:
        trajectory.append(x.clone())
    for level in order.tolist():
        sigma = ladder[level]
        alpha = cfg.step_size * (sigma / sigma_min) ** 2
        sig_b = sigma.expand(len(sizes)).clone()
        lvl_b = torch.full((len(sizes),), level, dtype=torch.long)
        steps = [True] * cfg.steps_per_level + ([False] if cfg.final_half_step else [])
        for noisy in steps:
            score = net(x, mask, sig_b, lvl_b)
            x = x + 0.5 * alpha * score
            if noisy:
                x = x + torch.sqrt(alpha) * symmetric_noise(x.shape, mask, generator)
            x = 0.5 * (x + x.transpose(1, 2)) * em
            if trajectory is not None:
                trajectory.append(x.clone())
    return [x[b, :k, :k].numpy().astype(np.float64) for b, k in enumerate(sizes)]


def langevin_sample(model: DiffusionModel, k: int, cfg: SamplerConfig, seed: int) -> np.ndarray:
    """One continuous adjacency sample for class ``k``."""
    return sample_continuous(model, k, 1, cfg, seed)[0]


def sample_continuous(model: DiffusionModel, k: int, count: int, cfg: SamplerConfig, seed: int):
    net = model.network_for(k)
    hist = model.node_counts.get(k)
    if hist is None or hist.sum() == 0:
        # advanced models can be asked for a class they never saw; borrow all sizes
        width = max(len(h) for h in model.node_counts.values())
        hist = np.sum([np.pad(h, (0, width - len(h))) for h in model.node_counts.values()], axis=0)
    rng = np.random.default_rng(seed)
    sizes = rng.choice(len(hist), size=count, p=hist / hist.sum()).tolist()
    sizes = [max(int(s), 1) for s in sizes]
    return annealed_langevin(net, model.ladder_for(k), sizes, cfg, seeded(seed))


def binarize(continuous: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    a = (np.asarray(continuous) > threshold).astype(np.uint8)
    a = np.maximum(a, a.T)
    np.fill_diagonal(a, 0)
    return a


def featurize(adjacency: np.ndarray, label: int, local: GraphSet, policy: str, rng) -> np.ndarray:
    """Node features for a sampled structure, ``local.feature_dim`` columns wide."""
    x = _features(adjacency, label, local, policy, rng)
    if x.shape[1] < local.feature_dim:
        x = np.pad(x, ((0, 0), (0, local.feature_dim - x.shape[1])))
    return x.astype(np.float32)


def _features(adjacency: np.ndarray, label: int, local: GraphSet, policy: str, rng) -> np.ndarray:
    if policy == "auto":
        policy = {"degree": "degree", "none": "constant"}.get(local.feature_kind, "empirical-row")
    if policy == "degree":
        cap = local.max_degree if local.max_degree is not None else local.feature_dim - 1
        return degree_one_hot(adjacency, cap)
    if policy == "constant":
        return np.ones((adjacency.shape[0], 1), dtype=np.float32)
    if policy == "empirical-row":
        pool = [g for g in local if g.label == label] or list(local)
        rows = np.concatenate([g.features for g in pool], axis=0)
        return rows[rng.integers(0, len(rows), size=adjacency.shape[0])]
    raise ValueError(f"unknown feature policy {policy!r}")


def binarize_and_featurize(continuous, label: int, local: GraphSet, policy: str = "auto",
                           rng=None, threshold: float = 0.5) -> Graph:
    rng = rng if rng is not None else np.random.default_rng(0)
    adj = binarize(continuous, threshold)
    return Graph(adj, featurize(adj, label, local, policy, rng), label, origin="synthetic")


def generate_graphs(model: DiffusionModel, k: int, count: int, cfg: SamplerConfig, local: GraphSet,
                    policy: str, seed: int) -> list[Graph]:
    """Sample ``count`` graphs of class ``k``; edgeless samples are redrawn up to ``max_attempts`` times."""
    if count <= 0:
        return []
    rng = np.random.default_rng(seed)
    graphs: list[Graph | None] = [None] * count
    pending = list(range(count))
    for attempt in range(cfg.max_attempts):
        draws = sample_continuous(model, k, len(pending), cfg, seed + 7919 * (attempt + 1))
        retry = []
        for slot, cont in zip(pending, draws):
            g = binarize_and_featurize(cont, k, local, policy, rng, cfg.threshold)
            graphs[slot] = g
            if g.edge_count == 0:
                retry.append(slot)
        pending = retry
        if not pending:
            break
    return graphs

