"""Run configuration files and the bundled dataset-shaped presets.

A configuration is a JSON object with four sections:

``model``  ModelConfig fields (channels, window length, classes, scales, K, widths)
``train``  TrainConfig fields (lr, weight decay, epochs, patience, batch size, alpha, beta)
``rf``     ``block_sizes``, ``n_trees``, ``max_depth`` for the feature forest
``ssl``    ``block_size``, ``lr``, ``weight_decay``, ``max_epochs``, ``batch_size`` for pretraining

plus optional ``name`` and ``description`` strings.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources

from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("model", "train", "rf", "ssl")
RF_KEYS = {"block_sizes", "n_trees", "max_depth"}
SSL_KEYS = {"block_size", "lr", "weight_decay", "max_epochs", "batch_size"}


class ConfigMismatch(ValueError):
    """A dataset does not have the shape a configuration was built for."""


@dataclass
class RunConfig:
    name: str
    model: dict
    train: dict
    rf: dict = field(default_factory=dict)
    ssl: dict = field(default_factory=dict)
    description: str = ""

    @classmethod
    def from_json(cls, data: dict, name: str = "custom") -> "RunConfig":
        unknown = set(data) - set(SECTIONS) - {"name", "description"}
        if unknown:
            raise ValueError(f"config: unknown top-level keys {sorted(unknown)}")
        if "model" not in data:
            raise ValueError("config: missing 'model' section")
        for section, allowed in (("rf", RF_KEYS), ("ssl", SSL_KEYS)):
            extra = set(data.get(section, {})) - allowed
            if extra:
                raise ValueError(f"config: unknown {section} keys {sorted(extra)}")
        cfg = cls(name=data.get("name", name), model=dict(data["model"]), train=dict(data.get("train", {})),
                  rf=dict(data.get("rf", {})), ssl=dict(data.get("ssl", {})),
                  description=data.get("description", ""))
        cfg.model_config()
        cfg.train_config()
        return cfg

    def to_json(self) -> dict:
        return {"name": self.name, "description": self.description, "model": self.model, "train": self.train,
                "rf": self.rf, "ssl": self.ssl}

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self, **over) -> ModelConfig:
        return ModelConfig.from_json({**self.model, **over})

    def train_config(self, **over) -> TrainConfig:
        known = {f.name for f in dataclasses.fields(TrainConfig)}
        unknown = set(self.train) - known
        if unknown:
            raise ValueError(f"config: unknown train keys {sorted(unknown)}")
        return TrainConfig(**{**self.train, **over})

    def check_dataset(self, ds) -> None:
        """Raise ConfigMismatch unless ``ds`` has this configuration's channels, length and classes."""
        expect = {"channels": self.model.get("n_channels"), "window length": self.model.get("length"),
                  "classes": self.model.get("n_classes")}
        found = {"channels": ds.n_channels, "window length": ds.length, "classes": ds.n_classes}
        for key, want in expect.items():
            if want is not None and want != found[key]:
                raise ConfigMismatch(f"config {self.name!r} expects {want} {key}, dataset has {found[key]}")


def preset_names() -> list[str]:
    files = resources.files("tcnet").joinpath("presets").iterdir()
    return sorted(f.name[:-5] for f in files if f.name.endswith(".json"))


def load_preset(name: str) -> RunConfig:
    if name not in preset_names():
        raise ValueError(f"config: unknown preset {name!r}; available: {', '.join(preset_names())}")
    text = resources.files("tcnet").joinpath("presets").joinpath(f"{name}.json").read_text()
    return RunConfig.from_json(json.loads(text), name)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"config: {path} is not valid JSON ({exc})") from None
    return RunConfig.from_json(data, os.path.splitext(os.path.basename(path))[0])
