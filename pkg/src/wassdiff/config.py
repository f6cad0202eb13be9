"""Strict JSON run configuration; unknown keys are rejected."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError
from .grid import SyntheticPairConfig
from .scorenet import Architecture
from .sde import NoiseSchedule, SamplerConfig
from .training import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataSection(_Section):
    num_samples: int = Field(64, ge=1)
    fine_size: int = Field(32, ge=4)
    coarsen_factor: int = Field(8, ge=2)
    tail_heaviness: float = Field(1.0, ge=0)
    smoothness: float = Field(3.0, gt=0)
    seed: int = 0
    num_ancillary: int = Field(1, ge=0)
    dry_fraction: float = Field(0.4, ge=0, lt=1)
    scale: float = Field(8.0, gt=0)
    cell_km: float = Field(1.0, gt=0)
    c_p: float = Field(5.0, gt=0)


class ScheduleSection(_Section):
    sigma_min: float = Field(0.01, gt=0)
    sigma_max: float = Field(50.0, gt=0)
    eps: float = Field(1e-5, gt=0, lt=1)


class ModelSection(_Section):
    hidden_channels: int = Field(16, ge=1)
    depth: int = Field(2, ge=1)
    time_embed_dim: int = Field(32, ge=2)


class TrainSection(_Section):
    alpha: float = Field(0.2, ge=0, le=1)
    batch_size: int = Field(12, ge=1)
    num_iters: int = Field(2000, ge=0)
    ema_rate: float = Field(0.999, ge=0, lt=1)
    learning_rate: float = Field(2e-4, gt=0)
    grad_clip: float = Field(1.0, gt=0)
    lambda_weighting: Literal["sigma_squared"] = "sigma_squared"
    swd_projections: int = Field(100, ge=1)
    seed: int = 0
    checkpoint_every: int = Field(0, ge=0)
    dtype: Literal["float32", "float64"] = "float32"


class SamplerSection(_Section):
    num_steps: int = Field(1000, ge=1)
    langevin_steps: int = Field(1, ge=0)
    snr: float = Field(0.16, gt=0)
    seed: int = 0
    ensemble_size: int = Field(13, ge=1)


class MetricsSection(_Section):
    csi_threshold: float = 10.0
    pool_km: float = Field(16.0, gt=0)
    heavy_threshold: float = 56.0
    peak_quantile: float = Field(0.999, gt=0, lt=1)
    qq_ensemble: int = Field(16, ge=1)


class TiledSection(_Section):
    patch: int = Field(256, ge=4)
    stride: int = Field(192, ge=1)
    kernel_std: Optional[float] = Field(None, gt=0)


class ExperimentSection(_Section):
    num_train: int = Field(256, ge=2)
    num_eval: int = Field(4, ge=1)
    ensemble_size: int = Field(4, ge=1)
    alphas: list[float] = [0.0, 0.2]


class PathsSection(_Section):
    data_dir: Optional[str] = None
    out_dir: Optional[str] = None


class RunConfig(_Section):
    data: DataSection = DataSection()
    schedule: ScheduleSection = ScheduleSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    sampler: SamplerSection = SamplerSection()
    metrics: MetricsSection = MetricsSection()
    tiled: TiledSection = TiledSection()
    experiment: ExperimentSection = ExperimentSection()
    paths: PathsSection = PathsSection()

    # -- conversions --

    def pair_config(self) -> SyntheticPairConfig:
        d = self.data.model_dump()
        d.pop("num_samples")
        d.pop("c_p")
        return SyntheticPairConfig(**d)

    def noise_schedule(self) -> NoiseSchedule:
        return NoiseSchedule(**self.schedule.model_dump())

    def architecture(self, condition_channels: int) -> Architecture:
        return Architecture(condition_channels=condition_channels, **self.model.model_dump())

    def train_config(self) -> TrainConfig:
        d = self.train.model_dump()
        d.pop("dtype")
        return TrainConfig(**d)

    def torch_dtype(self):
        return torch.float64 if self.train.dtype == "float64" else torch.float32

    def sampler_config(self, ensemble_size: Optional[int] = None) -> SamplerConfig:
        d = self.sampler.model_dump()
        if ensemble_size is not None:
            d["ensemble_size"] = ensemble_size
        return SamplerConfig(**d)


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            parts.append(f"unknown config key '{loc}'")
        else:
            parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def parse_config(raw: dict) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None
    if cfg.schedule.sigma_min >= cfg.schedule.sigma_max:
        raise ConfigError("schedule.sigma_min must be below schedule.sigma_max")
    if cfg.tiled.stride > cfg.tiled.patch:
        raise ConfigError("tiled.stride must not exceed tiled.patch")
    if cfg.data.fine_size % cfg.data.coarsen_factor:
        raise ConfigError("data.fine_size must be divisible by data.coarsen_factor")
    return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return parse_config(raw)


def write_effective(cfg: RunConfig, out_dir, **extra) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "effective-config.json"
    path.write_text(json.dumps(cfg.model_dump(), indent=2))
    if extra:
        (out / "invocation.json").write_text(json.dumps(extra, indent=2, default=str))
    return path
