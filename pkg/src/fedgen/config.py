"""Experiment configuration: one structured file, validated as a whole.

A config is a mapping with a top-level ``seed`` and four sections::

    seed: 0
    data:       {source, corpus_dir, n_topics, docs_per_topic, doc_len, corpus_seed,
                 public_fraction, test_fraction, n_clients, concentration,
                 min_samples_per_client}
    model:      {dim, n_layers, n_heads, context_len, mlp_ratio, pretrain_steps,
                 pretrain_lr, pretrain_batch_size, pretrain_seed, backbone_path,
                 lora_rank, lora_scaling, lora_targets}
    federation: {strategy, participation, rounds, local_epochs, lr, batch_size,
                 weight_decay, strategy_params, parallel_clients}
    output:     {dir, formats}

Missing keys take the desk defaults below. ``seed`` drives partitioning,
adapter initialization, client selection and local shuffling; the corpus and
backbone have their own seeds so that sweeps over ``seed`` share them.
A run manifest (``{"config": ..., ...}``) is accepted wherever a config is.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import ConfigError
from .federation import STRATEGIES, FederationConfig
from .lora import LoraConfig
from .model import ModelConfig, attention_targets, linear_shapes


@dataclass
class DataSection:
    source: str = "synth"
    corpus_dir: str | None = None
    n_topics: int = 10
    docs_per_topic: int = 50
    doc_len: int = 65
    corpus_seed: int = 0
    public_fraction: float = 0.4
    test_fraction: float = 0.1
    n_clients: int = 20
    concentration: float = 0.3
    min_samples_per_client: int = 2

    def problems(self) -> list[str]:
        out = []
        if self.source not in ("synth", "dir"):
            out.append(f"data.source must be 'synth' or 'dir', got {self.source!r}")
        if self.source == "dir" and not self.corpus_dir:
            out.append("data.corpus_dir is required when data.source is 'dir'")
        elif self.source == "dir" and not Path(self.corpus_dir).is_dir():
            out.append(f"data.corpus_dir {self.corpus_dir!r} is not a directory")
        for name in ("n_topics", "docs_per_topic", "doc_len", "n_clients", "min_samples_per_client"):
            if getattr(self, name) < 1:
                out.append(f"data.{name} must be >= 1, got {getattr(self, name)}")
        if not self.concentration > 0:
            out.append(f"data.concentration must be > 0, got {self.concentration}")
        if self.public_fraction < 0 or self.test_fraction < 0 or self.public_fraction + self.test_fraction >= 1:
            out.append("data.public_fraction and data.test_fraction must be non-negative and sum below 1")
        return out


@dataclass
class ModelSection:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    context_len: int = 64
    mlp_ratio: int = 4
    pretrain_steps: int = 150
    pretrain_lr: float = 3e-3
    pretrain_batch_size: int = 32
    pretrain_seed: int = 0
    backbone_path: str | None = None
    lora_rank: int = 8
    lora_scaling: float = 16.0
    lora_targets: list = field(default_factory=lambda: ["wq", "wv"])

    def problems(self) -> list[str]:
        out = []
        for name in ("dim", "n_layers", "n_heads", "context_len", "mlp_ratio", "pretrain_batch_size", "lora_rank"):
            if getattr(self, name) < 1:
                out.append(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads >= 1 and self.dim % self.n_heads:
            out.append(f"model.dim {self.dim} is not divisible by model.n_heads {self.n_heads}")
        if self.pretrain_steps < 0:
            out.append(f"model.pretrain_steps must be >= 0, got {self.pretrain_steps}")
        if not self.lora_scaling > 0:
            out.append(f"model.lora_scaling must be > 0, got {self.lora_scaling}")
        if not self.lora_targets:
            out.append("model.lora_targets must be non-empty")
        if self.backbone_path is not None and not Path(self.backbone_path).is_file():
            out.append(f"model.backbone_path {self.backbone_path!r} does not exist")
        return out


@dataclass
class FederationSection:
    strategy: str = "FedGenEdge"
    participation: float = 0.1
    rounds: int = 50
    local_epochs: int = 5
    lr: float = 1e-4
    batch_size: int = 32
    weight_decay: float = 0.01
    strategy_params: dict = field(default_factory=dict)
    parallel_clients: int = 1

    def problems(self) -> list[str]:
        out = []
        if self.strategy not in STRATEGIES:
            out.append(f"federation.strategy {self.strategy!r} is not one of {', '.join(STRATEGIES)}")
        if not 0 < self.participation <= 1:
            out.append(f"federation.participation must lie in (0, 1], got {self.participation}")
        if self.rounds < 1:
            out.append(f"federation.rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 1:
            out.append(f"federation.local_epochs must be >= 1, got {self.local_epochs}")
        if self.lr < 0:
            out.append(f"federation.lr must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            out.append(f"federation.batch_size must be >= 1, got {self.batch_size}")
        if self.weight_decay < 0:
            out.append(f"federation.weight_decay must be >= 0, got {self.weight_decay}")
        if self.parallel_clients < 1:
            out.append(f"federation.parallel_clients must be >= 1, got {self.parallel_clients}")
        unknown = set(self.strategy_params) - {"ditto_lambda"}
        if unknown:
            out.append(f"federation.strategy_params has unknown keys {sorted(unknown)}")
        lam = self.strategy_params.get("ditto_lambda", 0.0)
        if not isinstance(lam, (int, float)) or lam < 0:
            out.append(f"federation.strategy_params.ditto_lambda must be a number >= 0, got {lam!r}")
        return out


@dataclass
class OutputSection:
    dir: str = "runs/default"
    formats: list = field(default_factory=lambda: ["csv"])

    def problems(self) -> list[str]:
        bad = [f for f in self.formats if f not in ("csv", "json")]
        out = [f"output.formats entries must be 'csv' or 'json', got {bad}"] if bad else []
        if "csv" not in self.formats:
            out.append("output.formats must include 'csv'")
        return out


_SECTIONS = {"data": DataSection, "model": ModelSection, "federation": FederationSection, "output": OutputSection}

PROFILES: dict[str, dict] = {
    "desk": {},
    "paper-scale": {
        "data": {"n_clients": 100, "docs_per_topic": 250},
        "federation": {"rounds": 500},
    },
}


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any] | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        if "config" in raw and isinstance(raw["config"], Mapping):
            raw = dict(raw["config"])
        problems = []
        profile = raw.pop("profile", "desk")
        if profile not in PROFILES:
            problems.append(f"profile {profile!r} is not one of {', '.join(PROFILES)}")
            profile = "desk"
        merged = _deep_merge(PROFILES[profile], raw)
        seed = merged.pop("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2 ** 64:
            problems.append(f"seed must be an unsigned 64-bit integer, got {seed!r}")
            seed = 0
        for key in sorted(set(merged) - set(_SECTIONS)):
            problems.append(f"unknown top-level key {key!r}")
        sections = {}
        for name, kind in _SECTIONS.items():
            body = merged.get(name, {}) or {}
            if not isinstance(body, Mapping):
                problems.append(f"{name} must be a mapping")
                body = {}
            sections[name], section_problems = _build_section(name, kind, body)
            problems.extend(section_problems)
        config = cls(seed, **sections)
        if not problems:
            problems.extend(config._cross_problems())
        if problems:
            raise ConfigError(problems)
        return config

    def _cross_problems(self) -> list[str]:
        out = []
        mc = self.model_config(vocab_size=128)
        shapes = linear_shapes(mc)
        for target in self.model.lora_targets:
            resolved = _resolve_targets(mc, [target])
            if not all(t in shapes for t in resolved):
                out.append(f"model.lora_targets entry {target!r} does not name a linear layer")
        try:
            self.lora_config(mc).check_shapes(shapes)
        except ConfigError as exc:
            out.extend(f"model.lora_rank: {p}" for p in exc.problems)
        if self.data.source == "synth":
            pool = self.data.n_topics * self.data.docs_per_topic * (1 - self.data.public_fraction - self.data.test_fraction)
            need = self.data.n_clients * self.data.min_samples_per_client
            if pool < need:
                out.append(f"data: about {pool:.0f} pool documents cannot give {self.data.n_clients} clients "
                           f"{self.data.min_samples_per_client} each")
        return out

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{name: asdict(getattr(self, name)) for name in _SECTIONS}}

    def model_config(self, vocab_size: int) -> ModelConfig:
        m = self.model
        return ModelConfig(vocab_size, m.dim, m.n_layers, m.n_heads, m.context_len, m.mlp_ratio)

    def lora_config(self, model_config: ModelConfig) -> LoraConfig:
        targets = _resolve_targets(model_config, self.model.lora_targets)
        return LoraConfig(self.model.lora_rank, float(self.model.lora_scaling), targets)

    def federation_config(self) -> FederationConfig:
        f = self.federation
        return FederationConfig(
            n_clients=self.data.n_clients, participation=f.participation, rounds=f.rounds,
            local_epochs=f.local_epochs, lr=f.lr, batch_size=f.batch_size, seed=self.seed,
            strategy=f.strategy, strategy_params=dict(f.strategy_params), weight_decay=f.weight_decay,
            parallel_clients=f.parallel_clients,
        )

    def with_overrides(self, **updates) -> "ExperimentConfig":
        """Copy with dotted-key overrides, e.g. ``{"federation.strategy": "Ditto"}``."""
        raw = self.to_dict()
        for key, value in updates.items():
            node = raw
            *path, last = key.split(".")
            for part in path:
                node = node.setdefault(part, {})
            node[last] = value
        return ExperimentConfig.from_dict(raw)


def _resolve_targets(model_config: ModelConfig, targets) -> tuple[str, ...]:
    """Short projection names (``wq``, ``w1``, ``head``) expand per layer; full ids pass through."""
    return tuple(sorted(dict.fromkeys(attention_targets(model_config, targets))))


def _build_section(name: str, kind, body: Mapping) -> tuple[Any, list[str]]:
    known = {f.name: f for f in fields(kind)}
    problems = [f"unknown key {name}.{k}" for k in sorted(set(body) - set(known))]
    values = {}
    defaults = kind()
    for key, value in body.items():
        if key not in known:
            continue
        expected = type(getattr(defaults, key))
        if value is None and getattr(defaults, key) is None:
            values[key] = None
        elif not _type_ok(value, expected, getattr(defaults, key)):
            problems.append(f"{name}.{key} has wrong type {type(value).__name__}")
        else:
            values[key] = float(value) if expected is float else value
    section = kind(**values)
    problems.extend(section.problems())
    return section, problems


def _type_ok(value, expected, default) -> bool:
    if default is None:
        return isinstance(value, str)
    if expected is bool:
        return isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, expected)


def _deep_merge(base: Mapping, override: Mapping) -> dict:
    out = {k: (dict(v) if isinstance(v, Mapping) else v) for k, v in base.items()}
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path) -> ExperimentConfig:
    """Read a JSON or YAML config (or run manifest) from ``path``."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (ValueError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is not None and not isinstance(raw, Mapping):
        raise ConfigError(f"config {path} must contain a mapping at top level")
    return ExperimentConfig.from_dict(raw)
