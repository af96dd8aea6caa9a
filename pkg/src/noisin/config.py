"""Training configuration, presets and the ``key = value`` config file format."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import numpy as np

from .model import DropoutConfig, NoisinModel, Placement, build_model
from .noise import Mode, NoiseSpec

EVAL_MODES = ("noise-off", "k-sample")
OPTIMIZERS = ("sgd", "asgd")


@dataclass
class TrainConfig:
    cell: str = "lstm"
    layers: int = 2
    hidden: int = 650
    embedding_dim: int = 0            # 0 means "same as hidden"
    family: str = "categorical"
    level: str = "word"
    max_vocab: int = 0                # 0 means unlimited
    noise_family: str = "gaussian"
    noise_mode: str = "off"
    gamma: float = 1.0
    alpha: float = 0.0                # 0 means the family default
    placement: str = "all"
    dropout_input: float = 0.5
    dropout_recurrent: float = 0.4
    dropout_output: float = 0.5
    dropout_per_sequence: bool = False
    k: int = 1
    optimizer: str = "sgd"
    asgd_start_epoch: int = 0         # 0 means never; required when optimizer = asgd
    lr: float = 30.0
    lr_decay: float = 1.2
    clip_norm: float = 0.25
    batch_size: int = 80
    eval_batch_size: int = 10
    unroll: int = 35
    max_epochs: int = 200
    seed: int = 1111
    dtype: str = "float64"
    eval_mode: str = "noise-off"
    eval_k: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.cell not in ("lstm", "ernn-tanh", "ernn-sigmoid"):
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.level not in ("word", "char"):
            raise ValueError(f"unknown level {self.level!r}")
        if self.eval_mode not in EVAL_MODES:
            raise ValueError(f"eval_mode must be one of {EVAL_MODES}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.optimizer == "asgd" and self.asgd_start_epoch < 1:
            raise ValueError("asgd needs asgd_start_epoch >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be float64 or float32")
        if self.layers < 1 or self.hidden < 1 or self.k < 1 or self.eval_k < 1:
            raise ValueError("layers, hidden, k and eval_k must be positive")
        if self.lr < 0 or self.lr_decay < 1:
            raise ValueError("lr must be nonnegative and lr_decay at least 1")
        Placement(self.placement)
        self.noise_spec()
        self.dropout_config()

    def noise_spec(self) -> NoiseSpec:
        return NoiseSpec(self.noise_family, self.gamma, self.alpha or None, Mode(self.noise_mode))

    def dropout_config(self) -> DropoutConfig:
        inp, rec = self.dropout_input, self.dropout_recurrent
        if self.cell != "lstm":
            # gate-level masks only exist for the LSTM
            inp = rec = 0.0
        return DropoutConfig(inp, rec, self.dropout_output, self.dropout_per_sequence)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, dict[str, Any]] = {
    "desk": dict(
        cell="lstm", layers=1, hidden=256, level="char", max_epochs=20, batch_size=32,
        eval_batch_size=10, unroll=35, dropout_input=0.0, dropout_recurrent=0.0, dropout_output=0.0,
        lr=10.0, clip_norm=0.25,
    ),
    "medium": dict(layers=2, hidden=650, level="word"),
    "large": dict(layers=2, hidden=1500, level="word"),
}


def _coerce(field_type, raw: str):
    t = field_type if isinstance(field_type, str) else field_type.__name__
    raw = raw.strip()
    if t == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if t == "int":
        return int(raw)
    if t == "float":
        return float(raw)
    return raw


def field_types() -> dict[str, str]:
    return {f.name: (f.type if isinstance(f.type, str) else f.type.__name__) for f in fields(TrainConfig)}


def parse_overrides(items: dict[str, str]) -> dict[str, Any]:
    types = field_types()
    out = {}
    for key, raw in items.items():
        key = key.strip().replace("-", "_")
        if key not in types:
            raise KeyError(f"unknown config key {key!r}")
        out[key] = _coerce(types[key], raw)
    return out


def read_config_file(path: str | Path) -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    text = Path(path).read_text(encoding="utf-8")
    parser.read_string("[config]\n" + text)
    return parse_overrides(dict(parser["config"]))


def format_config(cfg: TrainConfig) -> str:
    lines = [f"{k} = {_fmt(v)}" for k, v in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(format_config(cfg), encoding="utf-8")


def resolve_config(
    preset: str | None = None, config_file: str | Path | None = None, overrides: dict[str, Any] | None = None
) -> TrainConfig:
    """Defaults, then preset, then config file, then explicit overrides."""
    values: dict[str, Any] = {}
    if preset:
        if preset not in PRESETS:
            raise KeyError(f"unknown preset {preset!r}")
        values.update(PRESETS[preset])
    if config_file:
        values.update(read_config_file(config_file))
    if overrides:
        values.update(overrides)
    return TrainConfig(**values)


def model_from_config(cfg: TrainConfig, vocab_size: int, rng: np.random.Generator) -> NoisinModel:
    return build_model(
        vocab_size,
        cfg.hidden,
        cfg.layers,
        cfg.cell,
        cfg.family,
        noise=cfg.noise_spec(),
        rng=rng,
        embedding_dim=cfg.embedding_dim or None,
        dtype=cfg.np_dtype,
        k=cfg.k,
        placement=Placement(cfg.placement),
        dropout=cfg.dropout_config(),
    )
