"""Federated graph classification with exchanged graph diffusion models."""

from .config import ExperimentConfig, config_from_dict, load_config
from .diffusion import DiffusionConfig, DiffusionModel, SamplerConfig, generate_graphs, train_diffusion
from .federation import fedavg, privacy_aggregate, run_cefgc, run_fedavg_baseline
from .gin import GinClassifier, TrainConfig, evaluate_classifier, train_gnn
from .graphs import Graph, GraphSet, PartitionSpec, load_tu_dataset, partition_clients, split_graphs
from .wire import CommLedger, WireBlob, deserialize_model, serialize_model

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "config_from_dict", "load_config",
    "DiffusionConfig", "DiffusionModel", "SamplerConfig", "generate_graphs", "train_diffusion",
    "fedavg", "privacy_aggregate", "run_cefgc", "run_fedavg_baseline",
    "GinClassifier", "TrainConfig", "evaluate_classifier", "train_gnn",
    "Graph", "GraphSet", "PartitionSpec", "load_tu_dataset", "partition_clients", "split_graphs",
    "CommLedger", "WireBlob", "deserialize_model", "serialize_model",
]
