"""Three-round federated protocol, FedAvg, and the multi-round FedAvg baseline.

The "network" is in-process byte passing. Every payload crosses through
:class:`~fedgdiff.wire.CommLedger`, which is what the volume accounting reads.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import ExperimentConfig
from .diffusion import DiffusionModel, DomainError, generate_graphs, train_diffusion
from .gin import (
    GinClassifier, TrainConfig, dataset_loss, evaluate_classifier, train_epoch, train_gnn,
)
from .graphs import (
    GraphSet, PartitionSpec, load_tu_dataset, one_hot_degree_features, pad_features,
    partition_clients, split_graphs, summarize,
)
from .metrics import generation_quality, heterogeneity_report
from .nn import AdamState, ContractError, init_module, param_store
from .wire import (
    CLIENT_TO_SERVER, SERVER_TO_CLIENT, CommLedger, deserialize_model, make_codec, serialize_model,
)

HEADLINE_KINDS = ("diffusion-model", "gnn-weights")


class ProtocolError(RuntimeError):
    """A protocol step was invoked out of order or with missing inputs."""


class PhaseError(RuntimeError):
    """Wraps any failure inside a pipeline phase; ``phase`` names where it happened."""

    def __init__(self, phase: str, cause: BaseException):
        super().__init__(f"[{phase}] {type(cause).__name__}: {cause}")
        self.phase = phase
        self.cause = cause


@contextlib.contextmanager
def phase(name: str):
    try:
        yield
    except PhaseError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the phase tag
        raise PhaseError(name, exc) from exc


def derive_seed(master: int, role: str, index: int = 0) -> int:
    """Child seed from ``(master, role, index)``; independent of execution order."""
    digest = hashlib.blake2b(f"{int(master)}|{role}|{int(index)}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


# --------------------------------------------------------------------------- state


@dataclass
class ClientNode:
    cid: int
    train: GraphSet | None = None
    val: GraphSet | None = None
    test: GraphSet | None = None
    diffusion: DiffusionModel | None = None
    package: list[bytes] = field(default_factory=list)
    synthetic: list = field(default_factory=list)
    gnn: GinClassifier | None = None
    gnn_trace: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"client{self.cid}"


@dataclass
class ServerNode:
    codec: object
    aggregation: str = "plain"
    shuffle_seed: int = 0
    uploads: dict = field(default_factory=dict)  # client id -> encrypted diffusion blob
    gnn_uploads: dict = field(default_factory=dict)
    gnn_init: bytes | None = None
    global_gnn: GinClassifier | None = None
    phase: str = "collecting"  # collecting -> distributed -> aggregated

    def __post_init__(self):
        if self.aggregation not in ("plain", "privacy"):
            raise ValueError(f"unknown aggregation mode {self.aggregation!r}")
        if self.aggregation == "privacy" and not self.codec.server_can_compute:
            raise ProtocolError(
                f"codec {self.codec.identifier!r} is opaque to the server; privacy aggregation needs "
                "a codec the server can compute under"
            )


# --------------------------------------------------------------------------- aggregation


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ContractError(f"vector lengths differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DomainError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def nearest_partners(vectors: list[np.ndarray]) -> list[int]:
    """For each vector, the index of the most cosine-similar other vector (lowest index on ties)."""
    mat = np.stack([np.asarray(v, dtype=np.float64).ravel() for v in vectors])
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0):
        raise DomainError("cosine similarity is undefined for a zero vector")
    unit = mat / norms[:, None]
    sims = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(sims, -np.inf)
    return [int(j) for j in np.argmax(sims, axis=1)]  # argmax returns the first maximum


def _flat64(params: dict) -> np.ndarray:
    return np.concatenate([p.detach().numpy().astype(np.float64).ravel() for p in params.values()])


def _layout(params: dict) -> list:
    return [(name, tuple(p.shape)) for name, p in params.items()]


def _average_into(target: dict, a: dict, b: dict) -> None:
    with torch.no_grad():
        for name, p in target.items():
            mean = (a[name].detach().double() + b[name].detach().double()) / 2.0
            p.copy_(mean.to(p.dtype))


def privacy_aggregate(models: list[DiffusionModel]) -> list[DiffusionModel]:
    """Replace each model by the parameterwise mean of itself and its most similar peer.

    Basic-variant models are aggregated per label network; a label network
    that only one client holds is passed through unchanged.
    """
    if len(models) < 2:
        raise ProtocolError("privacy aggregation needs at least two models")
    variants = {m.variant for m in models}
    if len(variants) != 1:
        raise ContractError(f"mixed diffusion variants {sorted(variants)}")
    out = [copy.deepcopy(m) for m in models]
    if models[0].variant == "advanced":
        layouts = {tuple(_layout(m.parameters())) for m in models}
        if len(layouts) != 1:
            raise ContractError("diffusion models differ in architecture")
        partners = nearest_partners([_flat64(m.parameters()) for m in models])
        for i, j in enumerate(partners):
            _average_into(out[i].parameters(), models[i].parameters(), models[j].parameters())
        return out
    labels = sorted({k for m in models for k in m.networks})
    for k in labels:
        group = [i for i, m in enumerate(models) if k in m.networks]
        if len(group) < 2:
            continue
        stores = [param_store(models[i].networks[k]) for i in group]
        if len({tuple(_layout(s)) for s in stores}) != 1:
            raise ContractError(f"label-{k} networks differ in architecture")
        partners = nearest_partners([_flat64(s) for s in stores])
        for local, i in enumerate(group):
            _average_into(param_store(out[i].networks[k]), stores[local], stores[partners[local]])
    return out


def aggregate_payloads(payloads: list[bytes], codec) -> list[bytes]:
    """Privacy aggregation as the server performs it: on codec-domain payloads."""
    if not codec.server_can_compute:
        raise ProtocolError(f"codec {codec.identifier!r} does not allow server-side computation")
    models = [deserialize_model(codec.decrypt(p)) for p in payloads]
    return [codec.encrypt(serialize_model(m).data) for m in privacy_aggregate(models)]


def fedavg(models: list[GinClassifier]) -> GinClassifier:
    """Unweighted parameterwise mean (computed in float64)."""
    if not models:
        raise ProtocolError("nothing to average")
    archs = {tuple(sorted(m.architecture().items())) for m in models}
    if len(archs) != 1 or len({tuple(_layout(param_store(m))) for m in models}) != 1:
        raise ContractError("local classifiers differ in architecture")
    out = copy.deepcopy(models[0])
    stores = [param_store(m) for m in models]
    with torch.no_grad():
        for name, p in param_store(out).items():
            total = torch.zeros(p.shape, dtype=torch.float64)
            for s in stores:
                total += s[name].detach().double()
            p.copy_((total / len(models)).to(p.dtype))
    return out


# --------------------------------------------------------------------------- rounds


def round1_upload(client: ClientNode, server: ServerNode, ledger: CommLedger) -> int:
    if client.diffusion is None or not client.diffusion.networks:
        raise ProtocolError(f"{client.name} has no trained diffusion model to upload")
    if server.phase != "collecting":
        raise ProtocolError(f"server is not accepting uploads (phase {server.phase})")
    payload = server.codec.encrypt(serialize_model(client.diffusion).data)
    server.uploads[client.cid] = payload
    ledger.record(1, CLIENT_TO_SERVER, client.name, "server", "diffusion-model", len(payload))
    return len(payload)


def round2_package(server: ServerNode, client_ids: list[int], ledger: CommLedger,
                   gnn_init: GinClassifier) -> dict[int, list[bytes]]:
    """Shuffle, optionally aggregate, and send each client everyone else's model.

    Packages hold bare payloads: sender ids are dropped. The classifier
    initialisation goes to every client as a separately logged ``gnn-init``.
    """
    if server.phase != "collecting":
        raise ProtocolError(f"round 2 requested in phase {server.phase}")
    missing = [c for c in client_ids if c not in server.uploads]
    if missing:
        raise ProtocolError(f"missing round-1 upload from client(s) {missing}")
    payloads = [server.uploads[c] for c in client_ids]
    if server.aggregation == "privacy":
        payloads = aggregate_payloads(payloads, server.codec)
    rng = np.random.default_rng(server.shuffle_seed)
    packages = {}
    for pos, cid in enumerate(client_ids):
        others = [p for q, p in enumerate(payloads) if q != pos]
        packages[cid] = [others[k] for k in rng.permutation(len(others))]
        ledger.record(2, SERVER_TO_CLIENT, "server", f"client{cid}", "diffusion-model",
                      sum(len(p) for p in packages[cid]))
    server.gnn_init = serialize_model(gnn_init, kind="gnn-init").data
    for cid in client_ids:
        ledger.record(2, SERVER_TO_CLIENT, "server", f"client{cid}", "gnn-init", len(server.gnn_init))
    server.phase = "distributed"
    return packages


def round3_and_aggregate(clients: list[ClientNode], server: ServerNode, ledger: CommLedger) -> GinClassifier:
    if server.phase != "distributed":
        raise ProtocolError(f"round 3 requested in phase {server.phase}")
    init = deserialize_model(server.gnn_init) if server.gnn_init is not None else None
    for c in clients:
        if c.gnn is None:
            raise ProtocolError(f"{c.name} has no trained classifier")
        if init is not None and c.gnn.architecture() != init.architecture():
            raise ContractError(f"{c.name} classifier architecture differs from the broadcast init")
        blob = serialize_model(c.gnn)
        server.gnn_uploads[c.cid] = blob.data
        ledger.record(3, CLIENT_TO_SERVER, c.name, "server", "gnn-weights", blob.byte_length)
    received = [deserialize_model(server.gnn_uploads[c.cid]) for c in clients]
    server.global_gnn = fedavg(received)
    server.phase = "aggregated"
    return server.global_gnn


LocalWork = Callable[[ClientNode, list, bytes], GinClassifier]


def run_protocol(clients: list[ClientNode], server: ServerNode, ledger: CommLedger,
                 gnn_init: GinClassifier, local_work: LocalWork) -> GinClassifier:
    """Rounds 1-3 with ``local_work(client, package, init_bytes)`` between rounds 2 and 3."""
    with phase("round1"):
        for c in clients:
            round1_upload(c, server, ledger)
    with phase("round2"):
        packages = round2_package(server, [c.cid for c in clients], ledger, gnn_init)
    with phase("local-training"):
        for c in clients:
            c.package = packages[c.cid]
            c.gnn = local_work(c, c.package, server.gnn_init)
    with phase("round3"):
        return round3_and_aggregate(clients, server, ledger)


def volume_formula(diffusion_sizes: list[int], gnn_sizes: list[int]) -> int:
    """``sum D(DM_i) + sum_i sum_{j != i} D(DM_j) + sum D(GNN_i)``."""
    n = len(diffusion_sizes)
    total = sum(diffusion_sizes)
    return total + (n - 1) * total + sum(gnn_sizes)


# --------------------------------------------------------------------------- data


@dataclass
class FederatedData:
    clients: list[ClientNode]
    global_test: GraphSet
    num_classes: int
    feature_dim: int
    datasets: list[dict]


def load_datasets(cfg: ExperimentConfig) -> list[GraphSet]:
    sets = []
    for name in cfg.data.datasets:
        gs = load_tu_dataset(Path(cfg.data.root) / name, name)
        if name in cfg.data.degree_features:
            gs = one_hot_degree_features(gs, int(cfg.data.degree_features[name]))
        sets.append(gs)
    dim = max(gs.feature_dim for gs in sets)
    classes = max(gs.num_classes for gs in sets)
    return [pad_features(gs, dim, classes) for gs in sets]


def prepare_clients(cfg: ExperimentConfig, datasets: list[GraphSet] | None = None) -> FederatedData:
    """Global split, client partition, then per-client train/val/test splits."""
    datasets = datasets if datasets is not None else load_datasets(cfg)
    trains, tests = [], []
    for d, gs in enumerate(datasets):
        tr, va, te = split_graphs(gs, cfg.data.global_split, derive_seed(cfg.seed, "global-split", d))
        trains.append(tr.with_graphs(list(tr) + list(va), name=gs.name))
        tests.extend(te)
    spec = PartitionSpec(cfg.data.partition, cfg.data.clients, dict(cfg.data.assignment),
                         derive_seed(cfg.seed, "partition"))
    parts = partition_clients(trains, spec)
    clients = []
    for c, part in enumerate(parts):
        tr, va, te = split_graphs(part, cfg.data.local_split, derive_seed(cfg.seed, "local-split", c))
        clients.append(ClientNode(c, tr, va, te))
    ref = datasets[0]
    return FederatedData(clients, ref.with_graphs(tests, name="global-test"), ref.num_classes,
                         ref.feature_dim, [summarize(gs) for gs in datasets])


def _train_config(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    g = cfg.gnn
    return TrainConfig(g.lr, g.max_epochs, g.patience, g.batch_size, seed)


def init_classifier(cfg: ExperimentConfig, data: FederatedData) -> GinClassifier:
    return init_module(
        lambda: GinClassifier(data.feature_dim, data.num_classes, cfg.gnn.hidden, cfg.gnn.layers),
        derive_seed(cfg.seed, "gnn-init"),
    )


def _even(total: int, parts: int) -> list[int]:
    return [total // parts + (1 if i < total % parts else 0) for i in range(parts)]


def synthesize_for_client(client: ClientNode, models: list[DiffusionModel], cfg: ExperimentConfig,
                          seed: int) -> list:
    """``r * |train|`` graphs spread evenly over models, then round-robin over each model's labels."""
    total = int(round(cfg.synthetic.ratio * len(client.train)))
    graphs = []
    for m, (model, budget) in enumerate(zip(models, _even(total, len(models)))):
        labels = model.labels()
        if not labels or budget == 0:
            continue
        for k, count in zip(labels, _even(budget, len(labels))):
            graphs += generate_graphs(model, k, count, cfg.sampler, client.train,
                                      cfg.synthetic.feature_policy, derive_seed(seed, f"model{m}", k))
    return graphs


def cefgc_local_work(cfg: ExperimentConfig, codec) -> LocalWork:
    def work(client: ClientNode, package: list, init_bytes: bytes) -> GinClassifier:
        models = [deserialize_model(codec.decrypt(p)) for p in package]
        client.synthetic = synthesize_for_client(
            client, models, cfg, derive_seed(cfg.seed, "synthesis", client.cid)
        )
        train = client.train.with_graphs(list(client.train) + client.synthetic)
        clf, client.gnn_trace = train_gnn(
            train, client.val, deserialize_model(init_bytes),
            _train_config(cfg, derive_seed(cfg.seed, "gnn-train", client.cid)),
        )
        return clf

    return work


# --------------------------------------------------------------------------- pipelines


@dataclass
class RunResult:
    global_model: GinClassifier | None
    ledger: CommLedger
    metrics: dict
    checkpoints: dict = field(default_factory=dict)  # file name -> bytes
    traces: list = field(default_factory=list)  # (source, client, series, step, value)


def _r(x: float) -> float:
    return float(round(float(x), 10))


def _global_eval(model: GinClassifier, test: GraphSet) -> dict:
    acc, auc = evaluate_classifier(model, test)
    return {"accuracy": _r(acc), "auc": _r(auc), "test_graphs": len(test)}


def _communication(ledger: CommLedger) -> dict:
    return {
        "rounds": ledger.rounds(),
        "bytes_by_round": {str(k): v for k, v in sorted(ledger.by_round(HEADLINE_KINDS).items())},
        "headline_bytes": ledger.total(HEADLINE_KINDS),
        "all_bytes": ledger.total(),
        "by_kind": {k: ledger.total([k]) for k in sorted({e.kind for e in ledger.entries})},
    }


def run_cefgc(cfg: ExperimentConfig, data: FederatedData | None = None) -> RunResult:
    """Local diffusion training, the three-round exchange, local GIN training and one FedAvg."""
    with phase("data"):
        data = data or prepare_clients(cfg)
        codec = make_codec(cfg.federation.codec, cfg.federation.key)
    ledger = CommLedger()
    server = ServerNode(codec, cfg.federation.aggregation, derive_seed(cfg.seed, "shuffle"))
    with phase("diffusion-training"):
        for c in data.clients:
            c.diffusion = train_diffusion(c.train, cfg.variant, cfg.diffusion,
                                          derive_seed(cfg.seed, "diffusion", c.cid))
    init = init_classifier(cfg, data)
    global_model = run_protocol(data.clients, server, ledger, init, cefgc_local_work(cfg, codec))

    with phase("evaluation"):
        dm_sizes = [len(server.uploads[c.cid]) for c in data.clients]
        gnn_sizes = [len(server.gnn_uploads[c.cid]) for c in data.clients]
        comm = _communication(ledger)
        comm["gnn_init_bytes"] = ledger.total(["gnn-init"])
        comm["diffusion_model_bytes"] = dm_sizes
        comm["gnn_bytes"] = gnn_sizes
        comm["formula_bytes"] = volume_formula(dm_sizes, gnn_sizes)
        clients, traces = [], []
        for c in data.clients:
            row = {
                "id": c.cid,
                "train_graphs": len(c.train),
                "val_graphs": len(c.val),
                "test_graphs": len(c.test),
                "synthetic_graphs": len(c.synthetic),
                "synthetic_edgeless": sum(g.edge_count == 0 for g in c.synthetic),
                "diffusion_final_loss": [_r(t[-1]) for t in c.diffusion.loss_trace if t],
                "gnn_epochs": len(c.gnn_trace),
                "gnn_best_monitored": _r(min(t["monitored"] for t in c.gnn_trace)),
                "local_model_global_test": _global_eval(c.gnn, data.global_test),
            }
            if len(c.test):
                row["global_model_local_test_loss"] = _r(dataset_loss(global_model, c.test))
            if cfg.metrics.generation_quality and c.synthetic:
                q = generation_quality(c.synthetic, list(c.train), cfg.metrics.mmd_sigma)
                row["generation_mmd"] = {k: _r(v) for k, v in q.items()}
            clients.append(row)
            for series, trace in enumerate(c.diffusion.loss_trace):
                traces += [("diffusion", c.cid, f"net{series}", e, v) for e, v in enumerate(trace)]
            for e, t in enumerate(c.gnn_trace):
                traces += [("gnn", c.cid, "train", e, t["train"]), ("gnn", c.cid, "monitored", e, t["monitored"])]
        metrics = {
            "pipeline": cfg.pipeline,
            "variant": cfg.variant,
            "seed": cfg.seed,
            "num_clients": len(data.clients),
            "datasets": data.datasets,
            "global": _global_eval(global_model, data.global_test),
            "clients": clients,
            "communication": comm,
        }
        if cfg.metrics.heterogeneity:
            metrics["heterogeneity"] = _heterogeneity(cfg, data)
    checkpoints = {"global_gnn.fgdm": serialize_model(global_model).data}
    for c in data.clients:
        checkpoints[f"client{c.cid}_diffusion.fgdm"] = serialize_model(c.diffusion).data
    return RunResult(global_model, ledger, metrics, checkpoints, traces)


def _heterogeneity(cfg: ExperimentConfig, data: FederatedData) -> dict:
    rep = heterogeneity_report([c.train.with_graphs(list(c.train) + list(c.val) + list(c.test))
                                for c in data.clients],
                               cfg.metrics.awe_length, cfg.metrics.feature_bins)
    return {k: (_r(v) if isinstance(v, float) else v) for k, v in rep.as_dict().items()}


def _weighted_val_loss(model: GinClassifier, clients: list[ClientNode]) -> float:
    held = [(c.val, len(c.val)) for c in clients if len(c.val)]
    if not held:
        held = [(c.train, len(c.train)) for c in clients]
    return sum(dataset_loss(model, gs) * n for gs, n in held) / sum(n for _, n in held)


def run_fedavg_baseline(cfg: ExperimentConfig, data: FederatedData | None = None) -> RunResult:
    """Multi-round FedAvg with early stopping on the pooled client validation loss.

    Each round broadcasts the global weights, runs ``local_epochs`` of Adam
    (fresh optimizer state) on every client and averages the uploads.
    """
    with phase("data"):
        data = data or prepare_clients(cfg)
    ledger = CommLedger()
    global_model = init_classifier(cfg, data)
    gnn_bytes = len(serialize_model(global_model).data)
    best, best_round, best_model, since = np.inf, 0, copy.deepcopy(global_model), 0
    traces = []
    with phase("baseline-training"):
        rngs = {c.cid: np.random.default_rng(derive_seed(cfg.seed, "baseline", c.cid))
                for c in data.clients}
        rounds = 0
        for s in range(1, cfg.baseline.max_rounds + 1):
            rounds = s
            local = []
            for c in data.clients:
                ledger.record(s, SERVER_TO_CLIENT, "server", c.name, "gnn-broadcast", gnn_bytes)
                m = copy.deepcopy(global_model)
                state = AdamState(lr=cfg.gnn.lr)
                tcfg = _train_config(cfg, 0)
                for _ in range(cfg.baseline.local_epochs):
                    train_epoch(m, list(c.train), state, tcfg, rngs[c.cid])
                blob = serialize_model(m)
                ledger.record(s, CLIENT_TO_SERVER, c.name, "server", "gnn-weights", blob.byte_length)
                local.append(deserialize_model(blob))
            global_model = fedavg(local)
            monitored = _weighted_val_loss(global_model, data.clients)
            traces.append(("baseline", -1, "monitored", s, monitored))
            if monitored < best:
                best, best_round, best_model, since = monitored, s, copy.deepcopy(global_model), 0
            else:
                since += 1
                if since >= cfg.baseline.patience:
                    break
    with phase("evaluation"):
        comm = {
            "rounds": ledger.rounds(),
            "bytes_by_round": {str(k): v for k, v in sorted(ledger.by_round(["gnn-weights"]).items())},
            "headline_bytes": ledger.total(["gnn-weights"]),
            "all_bytes": ledger.total(),
            "by_kind": {k: ledger.total([k]) for k in ("gnn-broadcast", "gnn-weights")},
            "gnn_bytes": gnn_bytes,
            "formula_bytes": gnn_bytes * len(data.clients) * rounds,
        }
        metrics = {
            "pipeline": cfg.pipeline,
            "seed": cfg.seed,
            "num_clients": len(data.clients),
            "datasets": data.datasets,
            "global": _global_eval(best_model, data.global_test),
            "rounds_executed": rounds,
            "converged_round": best_round,
            "best_monitored": _r(best),
            "communication": comm,
        }
    return RunResult(best_model, ledger, metrics, {"global_gnn.fgdm": serialize_model(best_model).data},
                     traces)


def run_eval_only(cfg: ExperimentConfig, data: FederatedData | None = None) -> RunResult:
    """Dataset summaries and client heterogeneity without any training."""
    with phase("data"):
        data = data or prepare_clients(cfg)
    with phase("evaluation"):
        metrics = {
            "pipeline": cfg.pipeline,
            "seed": cfg.seed,
            "num_clients": len(data.clients),
            "datasets": data.datasets,
            "clients": [{"id": c.cid, "train_graphs": len(c.train), "val_graphs": len(c.val),
                         "test_graphs": len(c.test)} for c in data.clients],
            "heterogeneity": _heterogeneity(cfg, data),
        }
    return RunResult(None, CommLedger(), metrics)


PIPELINE_RUNNERS = {
    "cefgc": run_cefgc,
    "cefgc-advanced": run_cefgc,
    "fedavg-baseline": run_fedavg_baseline,
    "eval-only": run_eval_only,
}
