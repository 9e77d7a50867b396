"""Pipeline configuration: one JSON file, overridable from the command line."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

from .patches import AugmentConfig
from .phantom import PhantomConfig
from .stage2 import TrainConfig
from .volume import PreprocessConfig


class ConfigError(ValueError):
    """Invalid or unresolvable configuration."""


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    train_manifest: str = "data/train.json"
    val_manifest: str = "data/val.json"
    test_manifest: str = "data/test.json"
    model_dir: str = "models"
    report_dir: str = "reports"


@dataclass(frozen=True)
class RadiomicsConfig:
    window: int = 24
    block: int = 6
    energy_threshold: float = 0.995
    max_channels: Optional[int] = None
    min_features: int = 800
    windows_per_case: int = 64
    k: int = 800
    dft_bins: int = 32
    lnt_n_out: int = 20
    lnt_subset: int = 200
    lnt_ridge: float = 1e-6
    lnt_seed: int = 0


@dataclass(frozen=True)
class Stage1Config:
    classifier: str = "gbdt"
    n_estimators: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    subsample: float = 0.8
    min_samples_leaf: int = 20
    max_bins: int = 64
    reg_lambda: float = 1.0
    logistic_alpha: float = 1e-4
    logistic_tol: float = 1e-6
    n_pos: int = 500
    n_neg: int = 1500
    stride: int = 4
    threshold: float = 0.3
    min_voxels: int = 8


@dataclass(frozen=True)
class EvalConfig:
    overlays: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    radiomics: RadiomicsConfig = field(default_factory=RadiomicsConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    n_cases: int = 100
    split: Tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    threads: int = 1

    def to_dict(self):
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in data.items():
        f = fields[name]
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data) -> PipelineConfig:
    return _build(PipelineConfig, data, "config")


def load_config(path=None, seed=None, loss=None, gamma=None, threads=None,
                overlays=None) -> PipelineConfig:
    """Defaults, then the JSON file at ``path``, then explicit overrides."""
    cfg = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        cfg = config_from_dict(data)
    s2 = {}
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed))
    if loss is not None:
        s2["loss"] = loss
    if gamma is not None:
        s2["gamma"] = float(gamma)
    try:
        if s2:
            cfg = dataclasses.replace(cfg, stage2=dataclasses.replace(cfg.stage2, **s2))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if threads is not None:
        if threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = dataclasses.replace(cfg, threads=int(threads))
    if overlays:
        cfg = dataclasses.replace(cfg, eval=EvalConfig(overlays=True))
    return cfg
