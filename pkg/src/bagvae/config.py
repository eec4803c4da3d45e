"""Run configuration.

Every field defaults to the NYT-style hyper-parameters, so an empty override
file reproduces that setup.  ``preset("wiki")`` switches to the WikiDistant
column.  Unknown keys are rejected at every level.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    train_corpus: str | None = None
    val_corpus: str | None = None
    test_corpus: str | None = None
    triples: str | None = None
    eval_pairs: str | None = None
    pretrained_vectors: str | None = None
    out_dir: str = "run"


@dataclass
class DataConfig:
    max_len: int = 50
    vocab_top_k: int = 40_000
    val_fraction: float = 0.10
    na_relation: str = "NA"


@dataclass
class ModelConfig:
    word_dim: int = 50
    pos_dim: int = 8
    latent_dim: int = 64
    enc_hidden: int = 256
    dec_hidden: int = 256
    rel_dim: int = 64
    softmax: str = "auto"  # auto | adaptive | full
    mode: str = "vae"  # vae | baseline


@dataclass
class TrainConfig:
    lam: float = 0.9
    prior_mode: str = "kb"  # normal | kb
    anneal_k: float | None = None
    anneal_x0: float | None = None
    max_epochs: int = 100
    patience: int = 5
    batch_size: int = 128
    bag_cap: int = 500
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    clip_norm: float = 10.0
    input_dropout: float = 0.3
    word_dropout: float = 0.3
    teacher_force: float = 0.3
    filter_prior_only: bool = False
    eval_batch_size: int = 256
    save_every_epoch: bool = True

    def validate(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if self.prior_mode not in ("normal", "kb"):
            raise ConfigError(f"prior_mode must be 'normal' or 'kb', got {self.prior_mode!r}")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.bag_cap < 1:
            raise ConfigError("bag_cap must be >= 1")
        if self.anneal_k is not None and self.anneal_k <= 0:
            raise ConfigError("anneal_k must be > 0")
        for name in ("input_dropout", "word_dropout", "teacher_force"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {value}")


@dataclass
class TransEConfig:
    dim: int | None = None  # None: use the model's latent dimension
    max_steps: int = 500_000
    batch_size: int = 1024
    neg_size: int = 256
    learning_rate: float = 0.1
    gamma: float = 10.0
    adversarial: bool = True
    adv_temperature: float = 1.0
    reg_coef: float = 1e-7
    reg_norm: int = 3
    optimizer: str = "adagrad"  # adagrad | adam
    prune_validation: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    transe: TransEConfig = field(default_factory=TransEConfig)

    def validate(self) -> None:
        self.train.validate()
        if self.model.mode not in ("vae", "baseline"):
            raise ConfigError(f"model.mode must be 'vae' or 'baseline', got {self.model.mode!r}")
        if self.model.softmax not in ("auto", "adaptive", "full"):
            raise ConfigError(f"model.softmax must be auto, adaptive or full, got {self.model.softmax!r}")
        if self.data.vocab_top_k < 1:
            raise ConfigError("data.vocab_top_k must be >= 1")
        if not 0.0 < self.data.val_fraction < 1.0:
            raise ConfigError("data.val_fraction must lie in (0, 1)")
        if self.transe.dim is not None and self.transe.dim != self.model.latent_dim:
            raise ConfigError("transe.dim must equal model.latent_dim")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that fixes parameter shapes and semantics."""
        payload = {"data": {"max_len": self.data.max_len, "vocab_top_k": self.data.vocab_top_k},
                   "model": dataclasses.asdict(self.model)}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


PRESETS = {
    "nyt": {},
    "wiki": {
        "data": {"max_len": 30, "vocab_top_k": 50_000},
        "model": {"rel_dim": 128},
        "train": {"clip_norm": 5.0, "word_dropout": 0.1},
    },
}


def _merge(obj, overrides: dict, where: str):
    known = {f.name: f for f in fields(obj)}
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key {where}{key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be an object")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)
    return obj


def from_dict(overrides: dict | None = None, preset: str | None = None) -> RunConfig:
    cfg = RunConfig()
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}")
        _merge(cfg, PRESETS[preset], "")
    if overrides:
        _merge(cfg, overrides, "")
    cfg.validate()
    return cfg


def load(path, preset: str | None = None) -> RunConfig:
    try:
        overrides = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(overrides, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_dict(overrides, preset)


def save(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
