"""Run configuration: JSON sections, defaulting, canonical hashing.

A run config is a JSON object with the sections data / model / loss / train /
metrics / infer. Unknown sections or keys are rejected. The config hash is
the sha256 of the canonical (sorted-key, compact) JSON of the fully
defaulted config, so two configs hash equal iff they describe the same run.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError
from .networks import DiscriminatorConfig, GeneratorConfig
from .objectives import LossWeights
from .trainer import TrainConfig

__all__ = ["RunConfig", "default_config", "canonical_json", "config_hash"]


_DEFAULTS: dict = {
    "data": {
        "root": None,
        "hr_size": 256,
        "scale_factor": 4,
        "fractions": [0.64, 0.16, 0.20],
        "seed": 0,
        "verify_images": True,
    },
    "model": {
        "generator": {
            "in_channels": 3,
            "base_channels": 64,
            "num_rrdb": 5,
            "growth_channels": 32,
            "dense_blocks_per_rrdb": 3,
            "convs_per_dense": 5,
            "residual_scaling": 0.2,
            "dropout_rate": 0.2,
            "scale_factor": 4,
        },
        "discriminator": {
            "in_channels": 3,
            "base_channels": 64,
            "input_size": 256,
        },
    },
    "loss": {
        "w_pixel": 0.01,
        "w_perceptual": 1.0,
        "w_adversarial": 0.005,
        "w_semantic": 0.1,
        "feature_backend": "random-conv:0",
        "segmenter_backend": "oracle-threshold",
    },
    "train": {
        "max_epochs": 30,
        "patience": 10,
        "batch_size": 16,
        "lr_generator": 1e-4,
        "lr_discriminator": 1e-4,
        "finetune_lr": 1e-5,
        "adam_betas": [0.9, 0.999],
        "seed": 0,
        "monitor": "val_psnr",
    },
    "metrics": {
        "sr_mode": "deterministic",
        "mc_passes": 20,
    },
    "infer": {
        "mc_passes": 20,
        "seed": 0,
        "retain_passes": False,
    },
}


def default_config() -> dict:
    return copy.deepcopy(_DEFAULTS)


def _merge(base: dict, override: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be an object")
            out[key] = _merge(base[key], value, here)
        else:
            out[key] = value
    return out


def canonical_json(config: dict) -> str:
    """Stable, compact serialization used for hashing."""
    return json.dumps(config, sort_keys=True, separators=(",", ":"))


def config_hash(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


class RunConfig:
    """Fully defaulted run configuration with typed accessors."""

    def __init__(self, overrides: dict | None = None):
        if overrides is None:
            overrides = {}
        if not isinstance(overrides, dict):
            raise ConfigError("run config must be a JSON object")
        self._data = _merge(_DEFAULTS, overrides, "")
        # fail fast on bad section contents
        self.generator_config().validate()
        self.discriminator_config().validate()
        self.loss_weights().validate()
        self.train_config().validate()

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        return cls(obj)

    def apply(self, overrides: dict) -> None:
        """Merge another override layer (validated like file content)."""
        self._data = _merge(self._data, overrides, "")

    def override(self, section: str, key: str, value) -> None:
        """Apply one flag-level override (validated like file content)."""
        self.apply({section: {key: value}})

    def to_dict(self) -> dict:
        return copy.deepcopy(self._data)

    def hash(self) -> str:
        return config_hash(self._data)

    def section(self, name: str) -> dict:
        if name not in self._data:
            raise ConfigError(f"unknown config section {name!r}")
        return copy.deepcopy(self._data[name])

    def generator_config(self) -> GeneratorConfig:
        try:
            return GeneratorConfig(**self._data["model"]["generator"])
        except TypeError as exc:
            raise ConfigError(f"bad generator section: {exc}") from exc

    def discriminator_config(self) -> DiscriminatorConfig:
        try:
            return DiscriminatorConfig(**self._data["model"]["discriminator"])
        except TypeError as exc:
            raise ConfigError(f"bad discriminator section: {exc}") from exc

    def loss_weights(self) -> LossWeights:
        loss = self._data["loss"]
        return LossWeights(
            w_pixel=loss["w_pixel"],
            w_perceptual=loss["w_perceptual"],
            w_adversarial=loss["w_adversarial"],
            w_semantic=loss["w_semantic"],
        )

    def train_config(self) -> TrainConfig:
        t = dict(self._data["train"])
        t["adam_betas"] = tuple(t["adam_betas"])
        try:
            return TrainConfig(**t)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc

    def save(self, path: str | os.PathLike) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self._data, indent=2, sort_keys=True))
