"""Configuration dataclasses and the ``[model]/[train]/[loss]/[data]`` config file.

Defaults are the full-scale hyperparameters; :meth:`ModelConfig.reference`
gives the desk-scale architecture used for CPU training.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

RANGE_TAGS = ("close", "100m", "200m", "400m", "500m", "600m", "1000m")
TASKS = ("age", "sex", "bmi")


@dataclass
class ModelConfig:
    height: int = 64
    width: int = 44
    encoder: str = "reference-cnn"
    sil_channels: tuple[int, ...] = (16, 32, 512)
    smpl_dim: int = 82
    smpl_hidden: tuple[int, ...] = (128, 256)
    smpl_embed: int = 256
    smpl_dropout: float = 0.2
    token_dim: int = 512
    n_heads: int = 4
    n_blocks: int = 2
    token_sigma: float = 0.02
    gait_dim: int = 256
    n_age: int = 5
    n_sex: int = 2
    n_bmi: int = 4
    direct_hidden: int = 256
    task_fusion: bool = True
    self_attention: bool = True
    smpl_fusion: bool = True
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    n_train_ids: int = 0
    init_seed: int = 0

    @classmethod
    def reference(cls, **overrides) -> "ModelConfig":
        """Desk-scale architecture: (16, 32, 32) CNN, 64-wide tokens, 64-dim parts."""
        base = dict(sil_channels=(16, 32, 32), token_dim=64, gait_dim=64, direct_hidden=64)
        base.update(overrides)
        return cls(**base)

    @property
    def channels(self) -> int:
        return self.sil_channels[-1]

    @property
    def feature_hw(self) -> tuple[int, int]:
        return self.height // 4, self.width // 4

    @property
    def hmax(self) -> int:
        return max(self.feature_hw)

    @property
    def n_parts(self) -> int:
        return self.hmax

    def validate(self) -> None:
        if self.encoder not in ("reference-cnn", "external"):
            raise ConfigError(f"unknown encoder kind {self.encoder!r}")
        if self.encoder == "reference-cnn" and (self.height % 4 or self.width % 4):
            raise ConfigError("reference CNN needs height and width divisible by 4")
        if len(self.sil_channels) != 3 and self.encoder == "reference-cnn":
            raise ConfigError("reference CNN has exactly three stages")
        if self.token_dim % self.n_heads:
            raise ConfigError(f"token_dim {self.token_dim} is not divisible by n_heads {self.n_heads}")
        if self.n_blocks < 1:
            raise ConfigError("at least one fusion block is required")
        if self.smpl_embed != self.hmax**2:
            raise ConfigError(
                f"fusion needs smpl_embed == hmax**2, got {self.smpl_embed} vs {self.hmax}**2"
            )
        if not 0 <= self.smpl_dropout < 1:
            raise ConfigError("smpl_dropout must lie in [0, 1)")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    iterations: int = 200_000
    p_subjects: int = 16
    k_seqs: int = 4
    frames: int = 30
    margin: float = 0.2
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 50


@dataclass
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1.0
    beta1: float = 0.01
    beta2: float = 0.01
    beta3: float = 0.01

    @classmethod
    def with_beta(cls, beta: float, alpha: float = 1.0) -> "LossWeights":
        return cls(alpha, alpha, beta, beta, beta)

    def validate(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"loss weight {f.name} must be nonnegative")


@dataclass
class DataConfig:
    seed: int = 0
    subjects: int = 4
    sequences_per_subject: int = 4
    frames: int = 40
    test_sequences: int = 0
    ranges: tuple[str, ...] = ("close",)
    views: tuple[float, ...] = (0.0,)


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        return cls(
            model=_build(ModelConfig, d.get("model", {})),
            train=_build(TrainConfig, d.get("train", {})),
            loss=_build(LossWeights, d.get("loss", {})),
            data=_build(DataConfig, d.get("data", {})),
        )


def _build(cls, values: dict):
    hints = typing.get_type_hints(cls)
    for k in values:
        if k not in hints:
            raise ConfigError(f"unknown key {k!r} for {cls.__name__}")
    return cls(**{k: _coerce(hints[k], v, k) for k, v in values.items()})


def _coerce(tp, value, key):
    try:
        if tp is bool:
            if isinstance(value, str):
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if tp in (int, float, str):
            return tp(value)
        if typing.get_origin(tp) is tuple:
            (inner, *_) = typing.get_args(tp)
            items = value.split(",") if isinstance(value, str) else value
            return tuple(inner(str(x).strip()) if inner is not str else str(x).strip() for x in items if str(x).strip())
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None
    raise ConfigError(f"unsupported type for {key!r}")


def model_config_digest(cfg: ModelConfig) -> bytes:
    payload = json.dumps(dataclasses.asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(payload).digest()


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "loss": LossWeights, "data": DataConfig}


def load_config(path: str | os.PathLike | None = None, base: Config | None = None) -> Config:
    """Read an INI-style config; missing keys keep their defaults, unknown keys raise.

    ``COMBOGAIT_SEED`` in the environment overrides ``[train] seed``.
    """
    cfg = base or Config()
    if path is not None:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            target = getattr(cfg, section)
            merged = dataclasses.asdict(target)
            merged.update(dict(parser.items(section)))
            setattr(cfg, section, _build(_SECTIONS[section], merged))
    seed = os.environ.get("COMBOGAIT_SEED")
    if seed:
        try:
            cfg.train.seed = int(seed)
        except ValueError:
            raise ConfigError(f"COMBOGAIT_SEED must be an integer, got {seed!r}") from None
    return cfg


def dump_config(cfg: Config, path: str | os.PathLike) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for name in _SECTIONS:
        section = {}
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            section[k] = ",".join(str(x) for x in v) if isinstance(v, (list, tuple)) else str(v)
        parser[name] = section
    with open(Path(path), "w") as fh:
        parser.write(fh)
