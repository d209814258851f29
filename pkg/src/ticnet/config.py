"""Experiment configuration: one structured file tying data paths, model,
loss, training, evaluation, and anchor settings together.

Unknown fields are rejected (no silently ignored typos), and every tunable
defaults to the reference constants baked into the module dataclasses.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import SynthConfig
from .engine import TrainConfig
from .errors import ConfigError
from .evalkit import EvalProtocol
from .losses import LossConfig
from .model import ModelConfig


@dataclass
class DataSection:
    manifest: str | None = None
    annotations: str | None = None


@dataclass
class AnchorSection:
    path: str | None = None  # serialized anchor set; generated when absent
    k: int = 12
    seed: int = 0


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    data: DataSection = field(default_factory=DataSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalProtocol = field(default_factory=EvalProtocol)
    anchors: AnchorSection = field(default_factory=AnchorSection)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "data": dataclasses.asdict(self.data),
            "model": self.model.to_dict(),
            "loss": self.loss.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "anchors": dataclasses.asdict(self.anchors),
            "synth": dataclasses.asdict(self.synth),
        }


_SECTIONS = {
    "data": DataSection,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalProtocol,
    "anchors": AnchorSection,
    "synth": SynthConfig,
}
_SCALARS = {"seed", "out_dir"}


def _build_section(cls, payload: dict, prefix: str):
    if not isinstance(payload, dict):
        raise ConfigError(f"section {prefix!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for key in payload:
        if key not in known:
            raise ConfigError(f"unknown field: {prefix}.{key}")
    try:
        return cls(**payload)
    except TypeError as e:
        raise ConfigError(f"bad section {prefix!r}: {e}") from None


def config_from_dict(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("config root must be an object")
    # a run manifest embeds its resolved config under "config"
    if "config" in payload and isinstance(payload.get("config"), dict):
        payload = payload["config"]
    for key in payload:
        if key not in _SECTIONS and key not in _SCALARS:
            raise ConfigError(f"unknown field: {key}")
    cfg = ExperimentConfig()
    if "out_dir" in payload:
        cfg.out_dir = str(payload["out_dir"])
    for name, cls in _SECTIONS.items():
        if name in payload:
            setattr(cfg, name, _build_section(cls, payload[name], name))
    if "seed" in payload:
        cfg.seed = int(payload["seed"])
        # the root seed flows into sections unless they pin their own
        if "seed" not in payload.get("train", {}):
            cfg.train.seed = cfg.seed
        if "seed" not in payload.get("anchors", {}):
            cfg.anchors.seed = cfg.seed
    return cfg


def _reseed(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    cfg.train.seed = seed
    cfg.anchors.seed = seed
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON: {e}") from None
    return config_from_dict(payload)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)
        f.write("\n")


def apply_overrides(cfg: ExperimentConfig, seed: int | None = None,
                    out_dir: str | None = None) -> ExperimentConfig:
    """CLI flags win over file values."""
    if seed is not None:
        cfg.seed = seed
        _reseed(cfg, seed)
    if out_dir is not None:
        cfg.out_dir = out_dir
    return cfg
