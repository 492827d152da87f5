"""Declarative experiment configuration.

A run is a pure function of one ExperimentConfig; everything random is
derived from its master seed. Configs round-trip through plain dicts (and
therefore JSON files; see the README for the schema).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .federation import RoundConfig
from .losses import LossConfig
from .monitor import MonitorConfig

DATASET_KINDS = ("synthetic", "idx")


@dataclass
class DatasetConfig:
    kind: str = "synthetic"
    # synthetic parameters; per_class is sized so the default partition
    # (100 clients, 3-6 classes each, 50 samples per held class) fits
    class_count: int = 10
    feature_dim: int = 32
    per_class: int = 3200
    separation: float = 8.0
    # idx parameters (MNIST-layout binary files)
    images_path: str | None = None
    labels_path: str | None = None
    # per-class sizes carved out of the loaded data
    test_per_class: int = 50
    aux_per_class: int = 32

    def __post_init__(self) -> None:
        if self.kind not in DATASET_KINDS:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "idx" and (self.images_path is None or self.labels_path is None):
            raise ConfigError("idx dataset needs images_path and labels_path")
        if self.test_per_class < 1 or self.aux_per_class < 1:
            raise ConfigError("test_per_class and aux_per_class must be >= 1")


@dataclass
class ModelConfig:
    hidden_widths: tuple[int, ...] = (128, 64)
    hidden_activation: str = "relu"

    def __post_init__(self) -> None:
        self.hidden_widths = tuple(self.hidden_widths)  # type: ignore[assignment]
        if not self.hidden_widths:
            raise ConfigError("need at least one hidden layer")


@dataclass
class PartitionConfig:
    classes_per_client: tuple[int, int] = (3, 6)
    samples_per_class: int = 50
    global_ratio: float = 1.0
    minority_classes: tuple[int, ...] = ()
    feature_shift_sigma: float = 0.0

    def __post_init__(self) -> None:
        self.classes_per_client = tuple(self.classes_per_client)  # type: ignore[assignment]
        self.minority_classes = tuple(self.minority_classes)  # type: ignore[assignment]


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    rounds: RoundConfig = field(default_factory=RoundConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    monitor_enabled: bool = True
    # replace every client's data with a balanced allocation from this
    # round on (administrator acknowledgment protocol); None disables it
    acknowledgment_round: int | None = None

    def __post_init__(self) -> None:
        if self.acknowledgment_round is not None and self.acknowledgment_round < 1:
            raise ConfigError("acknowledgment_round must be >= 1")
        if self.loss.kind == "ratio" and not self.monitor_enabled and not self.loss.ratio_from_start:
            raise ConfigError(
                "ratio loss needs the monitor (or ratio_from_start) to ever activate"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.loss.minority_set is not None:
            d["loss"]["minority_set"] = list(self.loss.minority_set)
        d["model"]["hidden_widths"] = list(self.model.hidden_widths)
        d["partition"]["classes_per_client"] = list(self.partition.classes_per_client)
        d["partition"]["minority_classes"] = list(self.partition.minority_classes)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        data = dict(raw)
        kwargs: dict = {}
        if "seed" in data:
            kwargs["seed"] = int(data.pop("seed"))
        for key, sub in (
            ("dataset", DatasetConfig),
            ("model", ModelConfig),
            ("partition", PartitionConfig),
            ("rounds", RoundConfig),
            ("loss", LossConfig),
            ("monitor", MonitorConfig),
        ):
            if key in data:
                section = dict(data.pop(key))
                if key == "loss" and section.get("minority_set") is not None:
                    section["minority_set"] = tuple(section["minority_set"])
                kwargs[key] = sub(**section)
        for key in ("monitor_enabled", "acknowledgment_round"):
            if key in data:
                kwargs[key] = data.pop(key)
        if data:
            raise ConfigError(f"unknown config keys: {sorted(data)}")
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def to_json(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
