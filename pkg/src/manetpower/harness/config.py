"""Experiment configuration loaded from YAML (or JSON) files."""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..baselines import SolverConfig
from ..training import CSI_MODES, TrainingConfig

OUTPUT_DIR_ENV = "MANETPOWER_OUTPUT_DIR"
ALGORITHMS = ("gnn", "centralized", "single_channel", "equal_split")
DEFAULT_SNR_DB = (-10.0, -5.0, 0.0, 5.0, 10.0)


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    n: int = 10
    n_bands: int = 6
    edge_prob: float = 0.5
    snr_grid: list[float] = field(default_factory=lambda: list(DEFAULT_SNR_DB))
    train_size: int = 4000
    test_size: int = 500
    algorithms: list[str] = field(default_factory=lambda: list(ALGORITHMS))
    csi_mode: str = "true"
    n_pilots: int = 4
    seed: int = 0
    # ``{snr_db}`` in a path is replaced per grid point (one model per SNR)
    checkpoint: str | None = None
    checkpoint_small: str | None = None     # scalability: model trained on smaller graphs
    checkpoint_noisy: str | None = None     # robustness: noisy-CSI-aware model
    small_n: int = 8                        # node count the small model is trained on
    noisy_train_csi: str = "lmmse"          # what the noisy-aware model sees during training
    output_dir: str | None = None
    deterministic: bool = True
    workers: int = 1
    training: TrainingConfig = field(default_factory=TrainingConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if not self.snr_grid:
            raise ConfigError("SNR grid must not be empty")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("dataset sizes must be at least 1")
        if self.csi_mode not in CSI_MODES:
            raise ConfigError(f"csi_mode must be one of {CSI_MODES}")
        if self.csi_mode == "lmmse" and self.n_pilots < 1:
            raise ConfigError("lmmse CSI needs at least one pilot")
        unknown = set(self.algorithms) - set(ALGORITHMS)
        if unknown:
            raise ConfigError(f"unknown algorithms {sorted(unknown)}")
        if self.n < 2 or self.small_n < 2 or not 0 <= self.edge_prob <= 1:
            raise ConfigError("need n >= 2, small_n >= 2 and edge_prob in [0, 1]")
        if self.noisy_train_csi not in CSI_MODES:
            raise ConfigError(f"noisy_train_csi must be one of {CSI_MODES}")
        self.snr_grid = [float(s) for s in self.snr_grid]

    @property
    def out(self) -> Path:
        return Path(self.output_dir or os.environ.get(OUTPUT_DIR_ENV, "results"))

    def model_spec(self, model: str) -> tuple[str | None, int, TrainingConfig]:
        """(checkpoint template, training node count, training config) for a model kind."""
        if model == "main":
            return self.checkpoint, self.n, self.training
        if model == "small":
            return self.checkpoint_small, self.small_n, self.training
        if model == "noisy":
            return self.checkpoint_noisy, self.n, dataclasses.replace(self.training, train_csi=self.noisy_train_csi)
        raise ConfigError(f"unknown model kind {model!r}")

    def checkpoint_for(self, template: str | None, snr_db: float) -> Path:
        if template is None:
            raise ConfigError("a checkpoint path is required for learned algorithms")
        return Path(template.format(snr_db=_snr_tag(snr_db)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _snr_tag(snr_db: float) -> str:
    return f"{snr_db:g}"


def _build(cls, data: dict, where: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    # YAML reads a bare `true` as a boolean; string fields such as train_csi want the word
    data = {k: str(v).lower() if isinstance(v, bool) and isinstance(fields[k].default, str) else v
            for k, v in data.items()}
    _check_types(cls, data, where)
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


def _accepts(hint, value) -> bool:
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        return any(_accepts(h, value) for h in typing.get_args(hint))
    if hint is type(None):
        return value is None
    if origin is list:
        (item,) = typing.get_args(hint) or (typing.Any,)
        return isinstance(value, list) and all(_accepts(item, v) for v in value)
    if hint is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if hint is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if hint in (str, bool):
        return isinstance(value, hint)
    return True


def _check_types(cls, data: dict, where: str) -> None:
    hints = typing.get_type_hints(cls)
    for key, value in data.items():
        if not _accepts(hints[key], value):
            raise ConfigError(f"{where}: {key}={value!r} is not a valid {hints[key]}")


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    training = _build(TrainingConfig, data.pop("training", {}) or {}, "training")
    solver = _build(SolverConfig, data.pop("solver", {}) or {}, "solver")
    return _build(ExperimentConfig, {**data, "training": training, "solver": solver}, "experiment")


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    data = data or {}
    for key, value in (overrides or {}).items():
        _set_dotted(data, key, value)
    return config_from_dict(data)


def _set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    for p in parts[:-1]:
        data = data.setdefault(p, {})
    data[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` with the value parsed as YAML (so numbers and lists work)."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)
