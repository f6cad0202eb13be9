"""Variance-exploding SDE, its Gaussian transition kernel, and the PC sampler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Protocol

import numpy as np

from .errors import DimensionError, DomainError, NumericError
from .grid import DEFAULT_CP, NORMALIZED, ConditionTensor, GridField, denormalize_array
from .rng import stream

STREAM_PERTURB = 3
STREAM_SAMPLER = 4


@dataclass(frozen=True)
class NoiseSchedule:
    """sigma(t) = sigma_min * (sigma_max / sigma_min) ** t on [0, 1]; zero drift."""

    sigma_min: float = 0.01
    sigma_max: float = 50.0
    eps: float = 1e-5
    T: float = 1.0
    kind: str = "variance_exploding"

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise DomainError("need 0 < sigma_min < sigma_max")
        if not 0 < self.eps < 1:
            raise DomainError("eps must lie in (0, 1)")

    def sigma(self, t):
        """Vectorized sigma(t); no range check."""
        return self.sigma_min * (self.sigma_max / self.sigma_min) ** t

    def g(self, t):
        return self.sigma(t) * math.sqrt(2 * math.log(self.sigma_max / self.sigma_min))

    def time_grid(self, n: int) -> np.ndarray:
        """Decreasing sampler grid from 1 to eps."""
        return np.linspace(self.T, self.eps, n)


def sigma_at(schedule: NoiseSchedule, t: float) -> float:
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"t = {t} outside [0, 1]")
    return float(schedule.sigma(t))


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 1000
    langevin_steps: int = 1
    snr: float = 0.16
    seed: int = 0
    ensemble_size: int = 1

    def __post_init__(self):
        if self.num_steps < 1 or self.langevin_steps < 0 or self.ensemble_size < 1:
            raise DomainError("num_steps >= 1, langevin_steps >= 0 and ensemble_size >= 1")
        if self.snr <= 0:
            raise DomainError("snr must be positive")


def _vals(x):
    return x.values if isinstance(x, GridField) else np.asarray(x, dtype=np.float64)


def perturb(x0, schedule: NoiseSchedule, t: float, noise_seed: int):
    """Draw x(t) = x(0) + sigma(t) z. Returns (xt, z) as GridFields."""
    sigma = sigma_at(schedule, t)
    v = _vals(x0)
    z = stream(noise_seed, STREAM_PERTURB).standard_normal(v.shape)
    cell = x0.cell_km if isinstance(x0, GridField) else 1.0
    return (
        GridField(v + sigma * z, NORMALIZED, cell, "1"),
        GridField(z, NORMALIZED, cell, "1"),
    )


def score_target(xt, x0, schedule: NoiseSchedule, t: float) -> GridField:
    """Score of the Gaussian transition kernel, -(xt - x0) / sigma(t)^2."""
    a, b = _vals(xt), _vals(x0)
    if a.shape != b.shape:
        raise DimensionError(f"xt {a.shape} vs x0 {b.shape}")
    sigma = sigma_at(schedule, t)
    return GridField(-(a - b) / sigma**2, NORMALIZED, units="1")


class ScoreFn(Protocol):
    def __call__(self, x: np.ndarray, t: float, y: Optional[np.ndarray]) -> np.ndarray:
        """Score for a batch x of shape (M, H, W) at time t."""


class GaussianScore:
    """Exact score of the perturbed data law when x(0) ~ N(mean, sd^2 I), pixelwise."""

    def __init__(self, mean, sd: float, schedule: NoiseSchedule):
        self.mean = mean
        self.sd = sd
        self.schedule = schedule

    def __call__(self, x, t, y=None):
        var = self.sd**2 + self.schedule.sigma(t) ** 2
        return -(x - self.mean) / var


Observer = Callable[[int, float, np.ndarray], None]


def _langevin_step(x, s, z, snr):
    dims = tuple(range(1, x.ndim))
    g_norm = np.sqrt(np.sum(s * s, axis=dims))
    z_norm = np.sqrt(np.sum(z * z, axis=dims))
    with np.errstate(divide="ignore", invalid="ignore"):
        step = np.where(g_norm > 0, 2.0 * (snr * z_norm / g_norm) ** 2, 0.0)
    step = step.reshape((-1,) + (1,) * len(dims))
    x_mean = x + step * s
    return x_mean + np.sqrt(2.0 * step) * z


def run_pc(
    score_fn: ScoreFn,
    y: Optional[np.ndarray],
    shape: tuple[int, int],
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    observer: Optional[Observer] = None,
    c_p: float = DEFAULT_CP,
) -> np.ndarray:
    """Predictor-corrector sampling on arrays; returns (M, H, W) normalized samples.

    Each of the ``num_steps`` steps applies ``langevin_steps`` corrector
    updates followed by one reverse-diffusion predictor update. Member m draws
    all of its noise from its own stream, so members are independent of the
    ensemble size. The final predictor mean (no added noise) is returned.
    """
    m = cfg.ensemble_size
    rngs = [stream(cfg.seed, STREAM_SAMPLER, i) for i in range(m)]

    def noise():
        return np.stack([r.standard_normal(shape) for r in rngs])

    ts = schedule.time_grid(cfg.num_steps)
    sigmas = schedule.sigma(ts)
    x = schedule.sigma_max * noise()
    x_mean = x
    for k, t in enumerate(ts):
        t = float(t)
        for _ in range(cfg.langevin_steps):
            x = _langevin_step(x, score_fn(x, t, y), noise(), cfg.snr)
        sigma_next = sigmas[k + 1] if k + 1 < len(ts) else 0.0
        var = sigmas[k] ** 2 - sigma_next**2
        x_mean = x + var * score_fn(x, t, y)
        x = x_mean + math.sqrt(var) * noise()
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x_mean))):
            raise NumericError("non-finite sampler state", step=k)
        if observer is not None:
            observer(k, t, denormalize_array(x_mean, c_p).mean(axis=(1, 2)))
    return x_mean


def pc_sample(
    score_fn: ScoreFn,
    y: Optional[ConditionTensor],
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    observer: Optional[Observer] = None,
    shape: Optional[tuple[int, int]] = None,
    c_p: float = DEFAULT_CP,
) -> list[GridField]:
    """Draw ``cfg.ensemble_size`` conditional samples in normalized space.

    ``observer(step, t, mu_x)`` receives the mean denormalized intensity of
    every member after each step, with t decreasing.
    """
    if y is None and shape is None:
        raise DimensionError("need a condition or an explicit shape")
    if y is not None and shape is not None and tuple(shape) != y.shape:
        raise DimensionError(f"shape {shape} does not match condition {y.shape}")
    shape = tuple(shape or y.shape)
    y_arr = None if y is None else y.as_array(c_p)
    cell = 1.0 if y is None else y.channels[0].cell_km
    out = run_pc(score_fn, y_arr, shape, schedule, cfg, observer, c_p)
    return [GridField(v, NORMALIZED, cell, "1") for v in out]
