"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .checkpoint import config_hash
from .errors import ConfigError


@dataclass
class DataConfig:
    grammar: str = "bedroom-toy"
    n_max: int = 12
    code_dim: int = 16
    k_triplets: int = 2
    text_provider: str = "hash"
    text_dim: int = 64
    text_sidecar: str | None = None
    vertical_gap: float = 0.3
    close_dist: float = 1.0


@dataclass
class ModelConfig:
    layers: int = 4
    latent: int = 64
    hidden: int = 128
    mlp_depth: int = 2
    heads: int = 4
    conditioning: str = "edge_text_resnet_selfattn"
    geometry: str = "vector_delta"


@dataclass
class DiffusionConfig:
    steps: int = 100
    schedule: str = "linear"
    sigma: str = "beta"
    guidance: float = 0.0  # classifier-free guidance weight at sampling time; 0 is plain ancestral sampling


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 256
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    lr_schedule: str = "constant"  # or "cosine" (decay to 0 over train.steps)
    ema_decay: float = 0.0  # 0 disables; otherwise sampling uses the averaged weights
    text_dropout: float = 0.1
    checkpoint_every: int = 500
    eval_scenes: int = 128


@dataclass
class CodecConfig:
    seed: int = 0
    embed_dim: int = 96
    hidden: int = 128
    depth: int = 2
    num_classes: int | None = None  # defaults to the grammar's vocabulary size
    per_class: int = 20
    holdout: int = 5
    beta_kl: float = 1e-3
    steps: int = 1500
    batch_size: int = 32
    lr: float = 1e-3
    metric: str = "euclidean"


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def with_overrides(self, overrides: dict[str, Any]) -> "RunConfig":
        d = self.to_dict()
        for key, value in overrides.items():
            section, _, name = key.partition(".")
            if section not in d or not name or name not in d[section]:
                raise ConfigError(f"unknown config key {key!r}")
            d[section][name] = value
        return RunConfig.from_dict(d)


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"config section {where or '<root>'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(where + k for k in unknown)}")
    kwargs = {}
    for name, value in d.items():
        sub = _SECTIONS.get(name) if cls is RunConfig else None
        kwargs[name] = _build(sub, value, f"{name}.") if sub else value
    return cls(**kwargs)


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "diffusion": DiffusionConfig,
             "train": TrainConfig, "codec": CodecConfig}


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        cfg = RunConfig.from_dict(raw)
    return cfg.with_overrides(overrides or {})


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value``; the value is parsed as JSON when possible."""
    key, sep, value = text.partition("=")
    if not sep:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    try:
        return key.strip(), json.loads(value)
    except json.JSONDecodeError:
        return key.strip(), value
