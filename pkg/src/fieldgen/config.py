"""Run configuration: JSON files validated against a strict schema.

A config file names a ``profile`` (``desk`` or ``paper``) and may override
any field of it. Unknown keys anywhere are rejected.
"""

from __future__ import annotations

import copy
import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Strict):
    height: int = Field(64, ge=16)
    width: int = Field(64, ge=16)
    n_samples: int = Field(200, ge=0)
    seed: int = Field(0, ge=0)
    n_steps: int = Field(2000, ge=1)
    dt: float = 0.5
    pml_thickness: int = 10
    pml_order: int = 3
    pml_sigma_max: float = 1.0
    clip_amplitude: float = Field(0.4, gt=0)
    wavelength: float = Field(20.0, gt=0)
    min_size: int = Field(2, ge=1)
    max_size: int = Field(8, ge=1)
    heldout_fraction: float = Field(0.1, ge=0, le=1)
    canny_sigma: float = 1.0
    canny_lo: float = 0.1
    canny_hi: float = 0.3

    @model_validator(mode="after")
    def _check(self):
        if self.min_size > self.max_size:
            raise ValueError("min_size > max_size")
        if self.height % 8 or self.width % 8:
            raise ValueError("image extents must be divisible by 8")
        interior = min(self.height, self.width) - 2 * self.pml_thickness
        if self.max_size > interior:
            raise ValueError("max_size exceeds the non-absorbing interior")
        if not self.canny_lo < self.canny_hi:
            raise ValueError("canny_lo must be < canny_hi")
        return self


class VaeConfig(_Strict):
    in_channels: int = 3
    base_width: int = 16
    latent_channels: int = 64
    stages: int = 3

    @model_validator(mode="after")
    def _check(self):
        if 2**self.stages != 8:
            raise ValueError("the autoencoder compresses space exactly 8x (3 stages)")
        return self


class DiTConfig(_Strict):
    grid: int = Field(8, ge=2)
    dim: int = Field(128, ge=2)
    depth: int = Field(4, ge=1)
    heads: int = Field(4, ge=1)
    scales: tuple[int, ...] = (1, 2, 4)
    mlp_ratio: int = 4
    spatial_hidden: int = 32
    cond_width: int = 16

    @model_validator(mode="after")
    def _check(self):
        if self.dim % self.heads:
            raise ValueError("dim must be divisible by heads")
        if self.dim % 2:
            raise ValueError("dim must be even for the timestep embedding")
        if not self.scales or min(self.scales) < 1:
            raise ValueError("scales must be positive")
        return self


class ModelConfig(_Strict):
    vae: VaeConfig = VaeConfig()
    dit: DiTConfig = DiTConfig()
    seed: int = 0


class LossWeightsConfig(_Strict):
    diff: float = Field(1.0, ge=0)
    recon: float = Field(0.3, ge=0)
    edge: float = Field(0.1, ge=0)
    perc: float = Field(0.3, ge=0)
    prior: float = Field(0.4, ge=0)


class TrainConfig(_Strict):
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-5, ge=0)
    weight_decay: float = Field(0.01, ge=0)
    epochs: int = Field(30, ge=0)
    vae_epochs: int = Field(30, ge=0)
    vae_lr: float = Field(1e-3, ge=0)
    vae_batch_size: int = Field(8, ge=1)
    vae_kl_weight: float = Field(1e-4, ge=0)
    loss_weights: LossWeightsConfig = LossWeightsConfig()
    blend_horizon: int = Field(1000, ge=1)
    cfg_dropout: float = Field(0.1, ge=0, le=1)
    timesteps: int = Field(1000, ge=2)
    grad_clip: float = Field(1.0, gt=0)
    x0_clip: float = Field(4.0, gt=0)
    seed: int = 0
    checkpoint_every: int = Field(5, ge=1)
    eval_every: int = Field(0, ge=0)
    n_eval: int = Field(32, ge=1)
    eval_batch_size: int = Field(8, ge=1)


class SampleConfig(_Strict):
    steps: int = Field(25, ge=1)
    guidance: float = 2.5
    eta: float = 0.0
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.eta != 0.0:
            raise ValueError("only the deterministic sampler (eta = 0) is implemented")
        return self


class RunConfig(_Strict):
    profile: Literal["desk", "paper"] = "desk"
    dataset: DatasetConfig = DatasetConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    sample: SampleConfig = SampleConfig()

    def digest(self) -> str:
        """SHA-256 of the settings that determine model shapes and training."""
        payload = {"model": self.model.model_dump(mode="json"), "train": self.train.model_dump(mode="json")}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


PROFILES: dict[str, dict] = {
    "desk": {
        "dataset": {"height": 64, "width": 64, "n_samples": 200, "n_steps": 2000},
        "model": {
            "vae": {"base_width": 16, "latent_channels": 64},
            "dit": {"grid": 8, "dim": 128, "depth": 4, "heads": 4},
        },
        "train": {"batch_size": 4, "lr": 1e-3, "epochs": 30, "vae_epochs": 30, "n_eval": 32},
        "sample": {"steps": 25, "guidance": 2.5},
    },
    "paper": {
        "dataset": {"height": 256, "width": 256, "n_samples": 100_000, "n_steps": 10_240},
        "model": {
            "vae": {"base_width": 64, "latent_channels": 1024},
            "dit": {"grid": 8, "dim": 1024, "depth": 12, "heads": 16, "cond_width": 32},
        },
        "train": {"batch_size": 4, "lr": 1e-5, "epochs": 1820, "n_eval": 1000},
        "sample": {"steps": 25, "guidance": 2.5},
    },
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def build_config(overrides: dict | None = None) -> RunConfig:
    overrides = dict(overrides or {})
    profile = overrides.get("profile", "desk")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    merged = _merge(PROFILES[profile], overrides)
    merged["profile"] = profile
    try:
        return RunConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return build_config({})
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    return build_config(data)
