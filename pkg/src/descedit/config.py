"""Flat run configuration shared by every CLI command."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from .diffusion import GuidanceConfig, NoiseSchedule, TrainConfig
from .model import ModelConfig

TEXT_MODES = ("description", "instruction")
PATH_KEYS = ("dataset", "checkpoint", "out_dir")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    image_size: int = 16
    channels: int = 3
    patch_size: int = 2
    dim: int = 64
    blocks: int = 2
    heads: int = 4
    vocab_size: int = 23
    max_text_len: int = 16
    lora_rank: int = 8
    lora_alpha: Optional[float] = None
    fusion: str = "zero-linear"
    bridge_query: str = "reference"
    mlp_ratio: int = 4
    text_layers: int = 1
    prediction: str = "v"
    # schedule
    diffusion_steps: int = 200
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    # training
    lr: float = 1e-3  # bridge stage; calibrated for the desk protocol
    batch_size: int = 32
    steps: int = 3000
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    text_drop: float = 0.05
    image_drop: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    log_every: int = 100
    seed: int = 0
    text_mode: str = "description"
    holdout_count: int = 200
    # guidance
    lambda_image: float = 1.5
    lambda_text: float = 7.5
    sampler: str = "deterministic"
    inference_steps: int = 50
    # paths
    dataset: Optional[str] = None
    checkpoint: Optional[str] = None
    out_dir: str = "out"

    def __post_init__(self):
        if self.text_mode not in TEXT_MODES:
            raise ConfigError(f"text_mode must be one of {TEXT_MODES}, got {self.text_mode!r}")
        if self.image_size != 16 or self.channels != 3:
            raise ConfigError("the dataset format fixes images at 3x16x16")
        if self.holdout_count < 0:
            raise ConfigError("holdout_count must be >= 0")
        try:
            self.model_config()
            self.train_config()
            self.guidance_config()
            self.schedule()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.inference_steps > self.diffusion_steps:
            raise ConfigError("inference_steps exceeds diffusion_steps")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        data = asdict(self)
        data.update({k: v for k, v in changes.items() if v is not None})
        return RunConfig.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        """Hash of every non-path field."""
        body = {k: v for k, v in asdict(self).items() if k not in PATH_KEYS}
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def guidance_config(self) -> GuidanceConfig:
        return GuidanceConfig(self.lambda_image, self.lambda_text, self.sampler, self.inference_steps)

    def schedule(self) -> NoiseSchedule:
        return NoiseSchedule(self.diffusion_steps, self.beta_start, self.beta_end)
