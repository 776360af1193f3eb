"""Pipeline configuration: TOML or JSON documents with strict key checking.

The WEAKVESSEL_HOME environment variable overrides the configured data
root. Every CLI run echoes its resolved configuration next to its outputs
and holds a lock file so concurrent runs cannot clobber one directory.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ENV_HOME = "WEAKVESSEL_HOME"


class ConfigFileError(ValueError):
    """Raised for unreadable or invalid configuration documents."""


@dataclass
class TrainingSection:
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 20
    seed: int = 0
    augment: bool = True
    seg_lr: float = 1e-4
    cls_lr: float = 0.01
    cls_momentum: float = 0.9
    seg_base_channels: int = 64
    seg_dropout: float = 0.1
    cls_dropout: float = 0.5
    cls_channels: int = 64
    crops_per_epoch: int | None = None
    patches_per_epoch: int | None = None
    background_crop_fraction: float = 0.25


@dataclass
class PipelineConfig:
    data_root: str = "data"
    out_root: str = "out"
    polarity: str = "bright"
    patch_size: int = 32
    seg_patch_size: int = 96
    split_seed: int = 0
    seg_threshold: float = 0.5
    cls_threshold: float = 0.5
    pseudo_method: str = "kmeans"
    device: str = "cpu"
    training: TrainingSection = field(default_factory=TrainingSection)

    def validate(self) -> None:
        if self.patch_size <= 0 or self.seg_patch_size <= 0:
            raise ConfigFileError("patch sizes must be positive")
        if self.polarity not in ("bright", "dark"):
            raise ConfigFileError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        if self.pseudo_method not in ("kmeans", "gmm"):
            raise ConfigFileError(f"pseudo_method must be 'kmeans' or 'gmm'")

    def resolved(self) -> dict:
        return dataclasses.asdict(self)


def _build(section_cls, doc: dict, where: str):
    known = {f.name for f in fields(section_cls)}
    unknown = set(doc) - known
    if unknown:
        raise ConfigFileError(f"unknown config key(s) in {where}: {sorted(unknown)}")
    return doc


def load_config(path=None, overrides: dict | None = None) -> PipelineConfig:
    """Load a config document; later sources win (file < env < overrides)."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            if path.suffix == ".toml":
                doc = tomllib.loads(path.read_text())
            elif path.suffix == ".json":
                doc = json.loads(path.read_text())
            else:
                raise ConfigFileError(f"config must be .toml or .json, got {path.suffix!r}")
        except (OSError, tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc}") from exc

    training_doc = doc.pop("training", {})
    if not isinstance(training_doc, dict):
        raise ConfigFileError("'training' must be a table/object")
    _build(PipelineConfig, {**doc, "training": {}}, "config")
    _build(TrainingSection, training_doc, "training")

    cfg = PipelineConfig(**{**doc, "training": TrainingSection(**training_doc)})
    if os.environ.get(ENV_HOME):
        cfg.data_root = os.environ[ENV_HOME]
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if not hasattr(cfg, key):
            raise ConfigFileError(f"unknown override {key!r}")
        setattr(cfg, key, value)
    cfg.validate()
    return cfg


def echo_config(cfg: PipelineConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    path.write_text(json.dumps(cfg.resolved(), sort_keys=True, indent=1))
    return path
