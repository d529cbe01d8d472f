"""YAML experiment configs with strict key checking.

Example::

    seed: 7
    synth:
      n_bags: 400
      instances_per_bag: 12
    train:
      epochs: 20
    influence:
      variant: preconditioned_ip

Every field has a default except ``seed``. Unknown keys at any level raise
:class:`ConfigError` naming the key. Component seeds are not configurable
individually; they are all the experiment seed, with per-component random
substreams derived from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple

import yaml

from .container import canonical_json
from .influence import MODES, VARIANTS
from .model import ModelConfig
from .prune import PruneConfig
from .synth import SynthConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSection:
    encoder_hidden: Tuple[int, ...] = (32,)
    embed_dim: int = 32
    attn_dim: int = 16
    head_hidden: int = 16
    activation: str = "relu"


@dataclass(frozen=True)
class InfluenceSection:
    variant: str = "literal"
    checkpoint_mode: str = "strict"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")
        if self.checkpoint_mode not in MODES:
            raise ValueError(f"unknown checkpoint mode {self.checkpoint_mode!r}; valid: {', '.join(MODES)}")


@dataclass(frozen=True)
class PruneSection:
    k: int = 50
    ks: Tuple[int, ...] = ()
    ranking: str = "per_target_topk_union"
    orientation: str = "harmful"
    seed_policy: str = "same_as_baseline"


@dataclass(frozen=True)
class AuditSection:
    subset_size: Optional[int] = 100
    variant: str = "preconditioned_ip"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}")


@dataclass(frozen=True)
class MetricsSection:
    recall_fraction: float = 0.30
    kappa_weighting: str = "linear"

    def __post_init__(self):
        if not 0 < self.recall_fraction <= 1:
            raise ValueError("recall_fraction must lie in (0, 1]")
        if self.kappa_weighting != "linear":
            raise ValueError("only linear kappa weighting is supported")


_SECTIONS = {
    "synth": SynthConfig,
    "model": ModelSection,
    "train": TrainConfig,
    "influence": InfluenceSection,
    "prune": PruneSection,
    "audit": AuditSection,
    "metrics": MetricsSection,
}
_SEEDED = ("synth", "train")
_TUPLE_FIELDS = {"class_weights", "splits", "encoder_hidden", "ks"}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    influence: InfluenceSection = field(default_factory=InfluenceSection)
    prune: PruneSection = field(default_factory=PruneSection)
    audit: AuditSection = field(default_factory=AuditSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)

    def model_config(self) -> ModelConfig:
        return ModelConfig(in_dim=self.synth.feature_dim, **dataclasses.asdict(self.model))

    def prune_config(self) -> PruneConfig:
        return PruneConfig(k=self.prune.k, ks=self.prune.ks, variant=self.influence.variant,
                           checkpoint_mode=self.influence.checkpoint_mode, ranking=self.prune.ranking,
                           orientation=self.prune.orientation, seed_policy=self.prune.seed_policy)

    def to_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {"seed": self.seed}
        for name in _SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            d.pop("seed", None)
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def canonical(self) -> str:
        return canonical_json(self.to_dict())

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_overrides(self, **sections) -> "ExperimentConfig":
        d = self.to_dict()
        for name, values in sections.items():
            if name == "seed":
                d["seed"] = values
            else:
                d[name].update(values)
        return from_dict(d)


def _build_section(name: str, raw: Any, seed: int):
    cls = _SECTIONS[name]
    if raw is None:
        raw = {}
    if not isinstance(raw, Mapping):
        raise ConfigError(f"section {name!r} must be a mapping")
    allowed = {f.name for f in dataclasses.fields(cls)} - {"seed"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key {name}.{key}")
    values = {k: tuple(v) if k in _TUPLE_FIELDS and isinstance(v, list) else v for k, v in raw.items()}
    if name in _SEEDED:
        values["seed"] = seed
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} section: {exc}") from None


def from_dict(raw: Mapping, seed_override: Optional[int] = None) -> ExperimentConfig:
    if not isinstance(raw, Mapping):
        raise ConfigError("config must be a mapping")
    for key in raw:
        if key != "seed" and key not in _SECTIONS:
            raise ConfigError(f"unknown key {key}")
    seed = seed_override if seed_override is not None else raw.get("seed")
    if seed is None:
        raise ConfigError("seed is mandatory")
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    sections = {name: _build_section(name, raw.get(name), seed) for name in _SECTIONS}
    return ExperimentConfig(seed=seed, **sections)


def load(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return from_dict(raw or {}, seed_override)


def dump(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True)
