"""Experiment configuration: nested dataclasses loaded strictly from YAML/JSON."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .diffusion import DEFAULT_SIGMAS, DiffusionConfig, SamplerConfig
from .wire import CODECS

PIPELINES = ("cefgc", "cefgc-advanced", "fedavg-baseline", "eval-only")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DataConfig:
    root: str = "data"
    datasets: list = field(default_factory=lambda: ["MUTAG"])
    # dataset name -> degree cap, for sets without node labels
    degree_features: dict = field(default_factory=dict)
    partition: str = "single-dataset"
    clients: int = 3
    # client index -> dataset name (across-* modes)
    assignment: dict = field(default_factory=dict)
    global_split: list = field(default_factory=lambda: [0.8, 0.0, 0.2])
    local_split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])


@dataclass
class SyntheticConfig:
    ratio: float = 1.0
    feature_policy: str = "auto"


@dataclass
class GnnConfig:
    layers: int = 3
    hidden: int = 32
    lr: float = 0.01
    max_epochs: int = 500
    patience: int = 30
    batch_size: int = 32


@dataclass
class FederationConfig:
    codec: str = "passthrough"
    key: str = "shared-client-key"
    aggregation: str = "plain"


@dataclass
class BaselineConfig:
    max_rounds: int = 500
    local_epochs: int = 1
    patience: int = 30


@dataclass
class MetricsConfig:
    awe_length: int = 7
    feature_bins: int = 20
    mmd_sigma: float = 1.0
    generation_quality: bool = False
    heterogeneity: bool = False


@dataclass
class ExperimentConfig:
    pipeline: str = "cefgc-advanced"
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    gnn: GnnConfig = field(default_factory=GnnConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    @property
    def variant(self) -> str:
        return "basic" if self.pipeline == "cefgc" else "advanced"

    def validate(self) -> "ExperimentConfig":
        def need(ok, where, msg):
            if not ok:
                raise ConfigError(f"{where}: {msg}")

        need(self.pipeline in PIPELINES, "pipeline", f"must be one of {PIPELINES}")
        need(0 <= self.seed < 2**64, "seed", "must be an unsigned 64-bit integer")
        d = self.data
        need(d.partition in ("single-dataset", "across-dataset", "across-domain"),
             "data.partition", "unknown partition mode")
        need(d.clients >= 2, "data.clients", "need at least 2 clients")
        need(len(d.datasets) >= 1, "data.datasets", "need at least one dataset")
        for name in ("global_split", "local_split"):
            r = getattr(d, name)
            need(len(r) == 3 and min(r) >= 0 and abs(sum(r) - 1) <= 1e-9,
                 f"data.{name}", "must be three non-negative fractions summing to 1")
        need(len(self.diffusion.sigmas) >= 1 and min(self.diffusion.sigmas) > 0,
             "diffusion.sigmas", "must be a non-empty list of positive values")
        need(self.diffusion.epochs >= 0, "diffusion.epochs", "must be >= 0")
        need(self.sampler.steps_per_level >= 1, "sampler.steps_per_level", "must be >= 1")
        need(self.sampler.step_size >= 0, "sampler.step_size", "must be >= 0")
        need(self.sampler.threshold == 0.5, "sampler.threshold", "binarization threshold is fixed at 0.5")
        need(self.synthetic.ratio >= 0, "synthetic.ratio", "must be >= 0")
        need(self.synthetic.feature_policy in ("auto", "degree", "empirical-row", "constant"),
             "synthetic.feature_policy", "unknown policy")
        need(self.gnn.patience >= 1, "gnn.patience", "must be >= 1")
        need(self.federation.codec in CODECS, "federation.codec", f"must be one of {CODECS}")
        need(self.federation.aggregation in ("plain", "privacy"), "federation.aggregation",
             "must be 'plain' or 'privacy'")
        need(not (self.federation.aggregation == "privacy" and self.federation.codec == "stream"),
             "federation.aggregation", "privacy-enhanced aggregation needs a codec the server can compute under")
        need(self.baseline.patience >= 1, "baseline.patience", "must be >= 1")
        need(self.metrics.awe_length >= 1, "metrics.awe_length", "must be >= 1")
        return self


def _coerce(value, tp, where):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string")
        return value
    if tp in (list, tuple) or origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tp(value) if tp in (list, tuple) else list(value)
    if tp is dict or origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return dict(value)
    return value


def _build(cls, raw: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{where + '.' if where else ''}{key}: unknown key")
    kwargs = {
        k: _coerce(v, hints[k], f"{where + '.' if where else ''}{k}") for k, v in raw.items()
    }
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def config_from_dict(raw: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw or {})
    cfg.diffusion.sigmas = tuple(float(s) for s in cfg.diffusion.sigmas)
    cfg.data.assignment = {int(k): v for k, v in cfg.data.assignment.items()}
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if raw is not None and not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    out = dataclasses.asdict(cfg)
    out["diffusion"]["sigmas"] = list(cfg.diffusion.sigmas)
    out["data"]["assignment"] = {int(k): v for k, v in cfg.data.assignment.items()}
    return out


def dump_config(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return path


__all__ = [
    "ConfigError", "DataConfig", "DiffusionConfig", "SamplerConfig", "SyntheticConfig", "GnnConfig",
    "FederationConfig", "BaselineConfig", "MetricsConfig", "ExperimentConfig", "PIPELINES",
    "DEFAULT_SIGMAS", "config_from_dict", "load_config", "config_to_dict", "dump_config",
]
