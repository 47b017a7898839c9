"""Configuration dataclasses, YAML loading with flag overrides, and hashing.

A config file is YAML with sections {model, providers, train, eval, synth};
any missing key falls back to the dataclass default.  Environment variables
HOIGRAPH_SEED and HOIGRAPH_OUT override the seed and the output directory.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml


class ConfigError(Exception):
    """Bad configuration file or incompatible option values."""


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64                  # node width; pair width is 2d
    d_v: int = 64                # visual embedding width
    d_t: int = 64                # text embedding width
    d_b: int = 64                # backbone cell width
    branches: int = 4
    steps: int = 2               # refinement iterations
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_ff_multiplier: int = 4
    backbone_grid: int = 7
    use_adapter: bool = True
    adapter_rho_init: float = 0.5
    detector_exponent: float = 1.0
    score_threshold: float = 0.2
    max_persons: int = 15
    max_objects: int = 15
    persons_as_objects: bool = True
    param_seed: int = 0

    def __post_init__(self):
        if self.d % self.branches != 0:
            raise ConfigError("branches must divide the node width d")
        if self.decoder_layers > 0 and (2 * self.d) % self.decoder_heads != 0:
            raise ConfigError("decoder heads must divide the pair width 2d")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")


@dataclass(frozen=True)
class ProviderConfig:
    source: str = "stub"  # "stub" or "file"
    visual_path: Optional[str] = None
    text_path: Optional[str] = None
    interaction_path: Optional[str] = None
    backbone_path: Optional[str] = None
    appearance_path: Optional[str] = None

    def __post_init__(self):
        if self.source not in ("stub", "file"):
            raise ConfigError("provider source must be 'stub' or 'file'")
        if self.source == "file":
            for name in ("visual_path", "text_path", "interaction_path",
                         "backbone_path", "appearance_path"):
                if getattr(self, name) is None:
                    raise ConfigError(f"file providers need {name}")


@dataclass(frozen=True)
class TrainSettings:
    """Optimization knobs; desk-scale defaults (the full-protocol regime is
    30 epochs at batch size 32)."""

    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 8
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    weight_decay: float = 1e-4
    clip_norm: float = 0.1
    seed: int = 0
    eval_every: int = 0          # epochs between mAP snapshots; 0 = final only
    checkpoint_every: int = 1

    def __post_init__(self):
        if not (0.0 < self.focal_alpha < 1.0):
            raise ConfigError("focal alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ConfigError("focal gamma must be >= 0")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("bad batch size or epoch count")


@dataclass(frozen=True)
class EvalSettings:
    setting: str = "default"     # "default" or "known-object"
    iou_threshold: float = 0.5
    protocol: str = "hico"       # "hico" or "vcoco"
    scenario: int = 1

    def __post_init__(self):
        if self.setting not in ("default", "known-object"):
            raise ConfigError("eval setting must be 'default' or 'known-object'")
        if self.protocol not in ("hico", "vcoco"):
            raise ConfigError("protocol must be 'hico' or 'vcoco'")


@dataclass(frozen=True)
class AppConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    providers: ProviderConfig = field(default_factory=ProviderConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    synth: dict = field(default_factory=dict)


_SECTIONS = {
    "model": ModelConfig,
    "providers": ProviderConfig,
    "train": TrainSettings,
    "eval": EvalSettings,
}


def _build_section(cls, data: dict, section: str):
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - fields
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{section}] config: {exc}") from exc


def load_config(path=None, overrides: Optional[dict] = None) -> AppConfig:
    """Build the app config from an optional YAML file plus override dicts.

    ``overrides`` maps section name to {key: value}; overrides win over the
    file, the file wins over defaults.
    """
    data: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse config: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        unknown = set(data) - set(_SECTIONS) - {"synth"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    merged: dict = {}
    overrides = overrides or {}
    for section in list(_SECTIONS) + ["synth"]:
        sec = dict(data.get(section) or {})
        sec.update({k: v for k, v in (overrides.get(section) or {}).items()
                    if v is not None})
        merged[section] = sec
    env_seed = os.environ.get("HOIGRAPH_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError("HOIGRAPH_SEED must be an integer") from exc
        merged["train"]["seed"] = seed
        merged["synth"]["seed"] = seed
    return AppConfig(
        model=_build_section(ModelConfig, merged["model"], "model"),
        providers=_build_section(ProviderConfig, merged["providers"], "providers"),
        train=_build_section(TrainSettings, merged["train"], "train"),
        eval=_build_section(EvalSettings, merged["eval"], "eval"),
        synth=merged["synth"],
    )


def config_dict(cfg) -> dict:
    if dataclasses.is_dataclass(cfg):
        return dataclasses.asdict(cfg)
    return dict(cfg)


def config_hash(model_cfg: ModelConfig, num_categories: int, num_actions: int) -> str:
    """Stable 16-hex-digit hash of everything a checkpoint must agree on."""
    payload = {
        "model": config_dict(model_cfg),
        "num_categories": num_categories,
        "num_actions": num_actions,
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]
