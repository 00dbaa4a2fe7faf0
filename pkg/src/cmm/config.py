"""Experiment configuration: dataclasses, the flat key/value text format,
and the canonical serialization used for config hashing.

The text format is one `key = value` per line with `#` comments. Every field
of every config type has a documented key; unknown keys are a hard error.
Serialization is canonical (schema order, repr values) so
parse -> serialize -> parse is stable and hashes are reproducible.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from .encoders import ConfigError
from .moco import CmcConfig
from .objectives import AlignConfig
from .retrieval import RerankConfig
from .synth_data import DataConfig


@dataclass
class ModelConfig:
    visual_hidden: int = 512
    embed_dim: int = 64
    gru_hidden: int = 128
    feature_dim: int = 256
    table_seed: int = 7

    def validate(self):
        for name in ("visual_hidden", "embed_dim", "gru_hidden", "feature_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.03
    warmup_epochs: int = 2
    warmup_start_lr: float = 0.003
    decay_factor: float = 0.1
    decay_epochs: tuple = (20, 27)
    p_ids: int = 8
    k_inst: int = 4
    momentum: float = 0.999
    queue_capacity: int = 256
    cmc_enabled: bool = True
    optimizer: str = "sgd"  # slot for future adaptive optimizers
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    eval_every: int = 1
    seed: int = 0
    cmc: CmcConfig = field(default_factory=CmcConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    epsilon: float = 0.1  # identity-loss label smoothing

    def validate(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.epochs > 0 and self.warmup_epochs >= self.epochs:
            raise ConfigError("warmup_epochs must be < epochs")
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ConfigError("decay_epochs must be strictly increasing")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum must be in [0, 1]")
        if self.queue_capacity < 0:
            raise ConfigError("queue_capacity must be >= 0")
        batch = self.p_ids * self.k_inst
        if self.queue_capacity % batch != 0:
            raise ConfigError(
                f"queue_capacity ({self.queue_capacity}) must be a multiple of "
                f"the batch size ({batch})")
        if self.optimizer != "sgd":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigError("epsilon must be in [0, 1)")
        self.cmc.validate()
        self.align.validate()

    @property
    def batch_size(self):
        return self.p_ids * self.k_inst


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rerank: RerankConfig = field(default_factory=RerankConfig)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.train.validate()
        self.rerank.validate()


def _parse_bool(s):
    if s in ("true", "True", "1"):
        return True
    if s in ("false", "False", "0"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s):
    s = s.strip()
    if not s:
        return ()
    return tuple(int(part.strip()) for part in s.split(","))


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


# key -> (section attribute path, parser)
_SCHEMA = {
    "data.n_ids": ("data.n_ids", int),
    "data.n_val_ids": ("data.n_val_ids", int),
    "data.n_test_ids": ("data.n_test_ids", int),
    "data.images_per_id": ("data.images_per_id", int),
    "data.captions_per_image": ("data.captions_per_image", int),
    "data.n_slots": ("data.n_slots", int),
    "data.n_choices": ("data.n_choices", int),
    "data.noise_sigma": ("data.noise_sigma", float),
    "data.n_filler_tokens": ("data.n_filler_tokens", int),
    "data.fillers_per_caption": ("data.fillers_per_caption", int),
    "data.seed": ("data.seed", int),
    "model.visual_hidden": ("model.visual_hidden", int),
    "model.embed_dim": ("model.embed_dim", int),
    "model.gru_hidden": ("model.gru_hidden", int),
    "model.feature_dim": ("model.feature_dim", int),
    "model.table_seed": ("model.table_seed", int),
    "train.epochs": ("train.epochs", int),
    "train.base_lr": ("train.base_lr", float),
    "train.warmup_epochs": ("train.warmup_epochs", int),
    "train.warmup_start_lr": ("train.warmup_start_lr", float),
    "train.decay_factor": ("train.decay_factor", float),
    "train.decay_epochs": ("train.decay_epochs", _parse_int_tuple),
    "train.p_ids": ("train.p_ids", int),
    "train.k_inst": ("train.k_inst", int),
    "train.momentum": ("train.momentum", float),
    "train.queue_capacity": ("train.queue_capacity", int),
    "train.cmc_enabled": ("train.cmc_enabled", _parse_bool),
    "train.optimizer": ("train.optimizer", str),
    "train.checkpoint_every": ("train.checkpoint_every", int),
    "train.eval_every": ("train.eval_every", int),
    "train.seed": ("train.seed", int),
    "cmc.tau_c": ("train.cmc.tau_c", float),
    "cmc.reduction": ("train.cmc.reduction", str),
    "align.tau_p": ("train.align.tau_p", float),
    "align.tau_n": ("train.align.tau_n", float),
    "align.alpha": ("train.align.alpha", float),
    "align.beta": ("train.align.beta", float),
    "align.neg_reduction": ("train.align.neg_reduction", str),
    "id.epsilon": ("train.epsilon", float),
    "rerank.k": ("rerank.k", int),
    "rerank.weight": ("rerank.weight", float),
    "rerank.enabled": ("rerank.enabled", _parse_bool),
    "rerank.add_similarity": ("rerank.add_similarity", _parse_bool),
}


def _get_attr(cfg, path):
    obj = cfg
    parts = path.split(".")
    for p in parts[:-1]:
        obj = getattr(obj, p)
    return obj, parts[-1]


def parse_config(text):
    """Parse the flat key/value format into an ExperimentConfig."""
    cfg = ExperimentConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        path, parser = _SCHEMA[key]
        obj, attr = _get_attr(cfg, path)
        try:
            setattr(obj, attr, parser(value))
        except (ValueError, ConfigError) as e:
            raise ConfigError(f"key {key!r}: {e}") from e
    return cfg


def serialize_config(cfg):
    """Canonical text (schema order) for hashing and round-tripping."""
    lines = []
    for key, (path, _) in _SCHEMA.items():
        obj, attr = _get_attr(cfg, path)
        lines.append(f"{key} = {_fmt(getattr(obj, attr))}")
    return "\n".join(lines) + "\n"


def config_hash(cfg):
    """sha256 hex digest of the canonical serialization."""
    return hashlib.sha256(serialize_config(cfg).encode("utf-8")).hexdigest()
