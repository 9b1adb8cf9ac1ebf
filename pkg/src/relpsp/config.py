"""Training configuration and its INI file form.

Example::

    [model]
    architecture = 784-400-10
    kernel = rel

    [optimizer]
    name = adam
    lr = 0.001

    [training]
    epochs = 20
    batch_size = 128
    seed = 1

    [data]
    dataset = mnist
    path = /data/mnist
    train_subset = 10000

    [output]
    dir = runs/mnist400

Unknown sections or keys are rejected so typos do not silently fall back
to defaults.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .neuron import THRESHOLD, T_MAX


@dataclass
class ModelConfig:
    architecture: str = "784-400-10"
    kernel: str = "rel"
    threshold: float = THRESHOLD
    t_max: float = T_MAX
    tau: float = 1.0


@dataclass
class EncoderSection:
    t_min: float = 0.0
    t_max_input: float = 1.0
    intensity_max: float = 255.0


@dataclass
class OptimizerConfig:
    name: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    momentum: float = 0.0
    lr_decay: float = 1.0
    decay_every: int = 0


@dataclass
class TrainingSection:
    epochs: int = 100
    batch_size: int = 128
    seed: int = 0
    init_low: float = 0.0
    init_high: float = 2.0
    deterministic: bool = False
    threads: int = 0
    eval_every: int = 1
    census_probe: int = 1000


@dataclass
class DataConfig:
    dataset: str = "mnist"
    path: str = ""
    train_subset: int = 0
    test_subset: int = 0
    subset_seed: int = 0


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataConfig = field(default_factory=DataConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "TrainConfig":
        if self.training.epochs < 1 or self.training.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not self.optimizer.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.optimizer.lr}")
        if self.optimizer.name not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer.name!r}")
        if self.model.kernel not in ("rel", "alpha"):
            raise ValueError(f"unknown PSP kernel {self.model.kernel!r}")
        if self.data.dataset not in ("mnist", "fashion", "caltech"):
            raise ValueError(f"unknown dataset {self.data.dataset!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value: str, typ):
    if typ is bool or typ == "bool":
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if typ in (int, "int"):
        return int(value)
    if typ in (float, "float"):
        return float(value)
    return value.strip()


def load_config(path) -> TrainConfig:
    path = Path(path)
    parser = configparser.ConfigParser()
    with open(path) as f:
        parser.read_file(f)
    cfg = TrainConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for name in parser.sections():
        if name not in sections:
            raise ValueError(f"{path}: unknown section [{name}]")
        target = sections[name]
        types = {f.name: f.type for f in dataclasses.fields(target)}
        for key, value in parser.items(name):
            if key not in types:
                raise ValueError(f"{path}: unknown key {key!r} in [{name}]")
            try:
                setattr(target, key, _coerce(value, types[key]))
            except ValueError as exc:
                raise ValueError(f"{path}: [{name}] {key}: {exc}") from exc
    return cfg.validate()
