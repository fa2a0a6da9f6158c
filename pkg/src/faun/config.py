"""Declarative experiment configuration (JSON) with strict validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackSpec
from .data import TriggerSpec
from .errors import ConfigError
from .fl import FLConfig
from .unlearn import FaunConfig, FedEraserConfig

METHODS = ("faun", "retrain", "federaser", "finetune_only", "none")


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"
    num_classes: int = 10
    image_side: int = 16
    n_train: int = 4000
    n_test: int = 2000
    proxy_size: int = 200
    class_separation: float = 4.0
    noise_std: float = 0.2
    background: float = 0.15
    images_path: str | None = None
    labels_path: str | None = None
    limit: int | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ConfigError("kind must be 'synthetic' or 'idx'", "dataset.kind")
        if self.kind == "idx":
            for name in ("images_path", "labels_path"):
                value = getattr(self, name)
                if not value:
                    raise ConfigError("required for idx datasets", f"dataset.{name}")
                if not Path(value).exists():
                    raise ConfigError(f"file not found: {value}", f"dataset.{name}")
        if self.num_classes < 2:
            raise ConfigError("must be >= 2", "dataset.num_classes")
        if self.image_side < 1:
            raise ConfigError("must be >= 1", "dataset.image_side")
        for name in ("n_train", "n_test", "proxy_size"):
            if getattr(self, name) < 1:
                raise ConfigError("must be >= 1", f"dataset.{name}")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dims: tuple[int, ...] = (32,)


@dataclass(frozen=True)
class EvalConfig:
    train_every: int = 5
    unlearn_every: int = 1

    def __post_init__(self):
        if self.train_every < 1 or self.unlearn_every < 1:
            raise ConfigError("evaluation cadence must be >= 1", "eval")


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "faun"
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    faun: FaunConfig = field(default_factory=FaunConfig)
    federaser: FedEraserConfig = field(default_factory=FedEraserConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"must be one of {METHODS}", "method")
        fl = self.fl
        if fl.num_clients < 2:
            raise ConfigError("must be >= 2", "fl.num_clients")
        if not 0 <= fl.num_malicious or not 2 * fl.num_malicious < fl.num_clients:
            raise ConfigError(
                f"{fl.num_malicious} of {fl.num_clients} malicious: the threat model requires "
                "malicious clients to be fewer than half of all clients", "fl.num_malicious")
        if self.method in ("faun", "federaser", "finetune_only", "retrain") and fl.num_malicious < 1:
            raise ConfigError(f"method {self.method!r} needs at least one malicious client", "fl.num_malicious")
        if fl.rounds < 0 or fl.local_epochs < 0 or fl.batch_size < 1:
            raise ConfigError("rounds/local_epochs must be >= 0 and batch_size >= 1", "fl")
        if not fl.lr > 0 or not 0 <= fl.momentum < 1 or not fl.server_lr > 0:
            raise ConfigError("need lr > 0, momentum in [0, 1), server_lr > 0", "fl")
        if fl.partition not in ("iid", "dirichlet"):
            raise ConfigError("must be 'iid' or 'dirichlet'", "fl.partition")
        if fl.partition == "dirichlet" and not fl.alpha > 0:
            raise ConfigError("must be > 0", "fl.alpha")
        if self.attack.kind == "backdoor" and not 0 <= self.attack.trigger.target_class < self.dataset.num_classes:
            raise ConfigError("target class out of range", "attack.trigger.target_class")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring where outputs are written."""
        d = self.to_dict()
        d.pop("output_dir")
        canonical = json.dumps(d, sort_keys=True, separators=(",", ":"), ensure_ascii=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


NESTED = {
    (ExperimentConfig, "dataset"): DatasetConfig,
    (ExperimentConfig, "model"): ModelConfig,
    (ExperimentConfig, "fl"): FLConfig,
    (ExperimentConfig, "attack"): AttackSpec,
    (ExperimentConfig, "faun"): FaunConfig,
    (ExperimentConfig, "federaser"): FedEraserConfig,
    (ExperimentConfig, "eval"): EvalConfig,
    (AttackSpec, "trigger"): TriggerSpec,
}


def _build(cls, data, path, strict):
    if not isinstance(data, dict):
        raise ConfigError("expected an object", path or "<root>")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown and strict:
        where = ", ".join(f"{path}.{k}" if path else k for k in unknown)
        raise ConfigError(f"unknown key(s): {where}", path or "<root>")
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            continue
        sub_path = f"{path}.{key}" if path else key
        sub = NESTED.get((cls, key))
        if sub is not None:
            value = _build(sub, value, sub_path, strict)
        elif key == "hidden_dims":
            if not isinstance(value, (list, tuple)):
                raise ConfigError("expected a list of layer widths", sub_path)
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc), path or "<root>") from None


def from_dict(data: dict, strict=True) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "", strict)


def parse_override(text: str):
    """Split ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    data = json.loads(json.dumps(data))
    for text in overrides:
        keys, value = parse_override(text)
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError("cannot override inside a non-object", ".".join(keys))
        node[keys[-1]] = value
    return data


def load_config(path, overrides=(), strict=True) -> ExperimentConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", str(path)) from None
    return from_dict(apply_overrides(data, overrides), strict=strict)
