"""Experiment configuration: a single JSON document per sweep.

Every training default is also a config default, so a config that only names
a dataset reproduces the reference protocol. Example::

    {"name": "toy", "dataset": {"kind": "two_gaussians_binary", "n": 2000},
     "seeds": [0, 1, 2], "model": {"d_token": 32, "n_blocks": 1}}
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

from .augment import MASK_METHODS, MIX_METHODS, canonical_method
from .data import SYNTHETIC_KINDS
from .model import ModelConfig
from .training import ConfigError

ALPHA_GRID = (0.1, 0.2, 0.5, 0.75, 1.0, 1.5, 2.0)
P_M_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
EXPERIMENTS = ("supervised", "ssl")
CONTROL = "supervised"  # label of the no-pretraining row in ssl sweeps

SUPERVISED_METHODS = ("w/o DA", "manifold_mixup", "cutmix", "scarf", "hiddenmix", "mtr")
SSL_METHODS = (CONTROL, "manifold_mixup", "scarf", "hiddenmix", "mtr")


def default_grid(method: str) -> Optional[list[float]]:
    if method == CONTROL:
        return None
    m = canonical_method(method)
    if m in MASK_METHODS:
        return list(P_M_GRID)
    if m in MIX_METHODS:
        return list(ALPHA_GRID)
    return None


@dataclass
class MethodGrid:
    """One row of the results table: a label, its augmentation and a grid."""

    label: str
    grid: Optional[list[float]] = None

    def __post_init__(self):
        if self.label != CONTROL:
            try:
                canonical_method(self.label)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.grid is None:
            self.grid = default_grid(self.label)
        else:
            self.grid = [float(v) for v in self.grid]
            if not self.grid:
                raise ConfigError(f"method {self.label}: empty grid")
            if default_grid(self.label) is None:
                raise ConfigError(f"method {self.label} takes no hyperparameter")
            if len(set(self.grid)) != len(self.grid):
                raise ConfigError(f"method {self.label}: duplicate grid values")

    @property
    def method(self) -> str:
        return "none" if self.label == CONTROL else canonical_method(self.label)

    @property
    def values(self) -> list:
        return list(self.grid) if self.grid else [None]


@dataclass
class DatasetRef:
    """Either a synthetic ``kind`` or a CSV ``path`` with a JSON ``descriptor``."""

    kind: Optional[str] = None
    n: int = 2000
    n_features: Optional[int] = None
    path: Optional[str] = None
    descriptor: Optional[str] = None
    name: Optional[str] = None

    def __post_init__(self):
        if (self.kind is None) == (self.path is None):
            raise ConfigError("dataset needs exactly one of 'kind' or 'path'")
        if self.kind is not None and self.kind not in SYNTHETIC_KINDS:
            raise ConfigError(f"unknown synthetic kind {self.kind!r}")
        if self.path is not None and self.descriptor is None:
            raise ConfigError("a CSV dataset needs a 'descriptor' file")

    @property
    def label(self) -> str:
        return self.name or self.kind or Path(self.path).stem


@dataclass
class ExperimentConfig:
    name: str
    dataset: DatasetRef
    experiment: str = "supervised"
    methods: list[MethodGrid] = field(default_factory=list)
    seeds: list[int] = field(default_factory=lambda: list(range(10)))
    output_dir: str = "runs"
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    pretrain: dict = field(default_factory=dict)  # ssl-only TrainConfig overrides
    finetune_augmentation: bool = True
    workers: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.dataset, dict):
            self.dataset = DatasetRef(**self.dataset)
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"experiment must be one of {EXPERIMENTS}")
        if not self.methods:
            self.methods = [MethodGrid(m) for m in
                            (SUPERVISED_METHODS if self.experiment == "supervised" else SSL_METHODS)]
        self.methods = [m if isinstance(m, MethodGrid) else _method(m) for m in self.methods]
        labels = [m.label for m in self.methods]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate methods in {labels}")
        if self.experiment == "ssl":
            for m in self.methods:
                if m.method == "cutmix":
                    raise ConfigError("cutmix cannot be used for self-supervised pretraining")
        elif CONTROL in labels:
            raise ConfigError(f"'{CONTROL}' is only a row of ssl experiments; use 'w/o DA'")
        self.seeds = [int(s) for s in self.seeds]
        if not self.seeds:
            raise ConfigError("seeds must be nonempty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")
        known = {f.name for f in fields(ModelConfig)}
        if set(self.model) - known:
            raise ConfigError(f"unknown model settings {sorted(set(self.model) - known)}")
        for section in ("train", "pretrain"):
            bad = set(getattr(self, section)) - TRAIN_KEYS
            if bad:
                raise ConfigError(f"unknown {section} settings {sorted(bad)}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.model)

    def with_seed_offset(self, offset: int) -> "ExperimentConfig":
        d = self.to_dict()
        d["seeds"] = [s + offset for s in self.seeds]
        return ExperimentConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        if "name" not in d or "dataset" not in d:
            raise ConfigError("config needs 'name' and 'dataset'")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# keys accepted in the train/pretrain sections
TRAIN_KEYS = {"max_epochs", "patience", "lr", "weight_decay", "ssl_fraction", "temperature",
              "batch_size", "apply_probability", "label_mixing", "shared_mask"}


def _method(entry) -> MethodGrid:
    if isinstance(entry, str):
        return MethodGrid(entry)
    if isinstance(entry, dict):
        unknown = set(entry) - {"label", "grid"}
        if unknown:
            raise ConfigError(f"unknown method keys {sorted(unknown)}")
        return MethodGrid(**entry)
    raise ConfigError(f"cannot read method entry {entry!r}")


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return ExperimentConfig.from_dict(raw)
