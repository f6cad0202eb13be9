"""Score matching with Wasserstein distance regularization, training loop and EMA."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigError, DimensionError, TrainingError
from .grid import DEFAULT_CP, ConditionTensor, GridField, normalize
from .rng import stream
from .scorenet import Architecture, ScoreModel, save_checkpoint
from .sde import NoiseSchedule
from .transport import draw_directions

log = logging.getLogger(__name__)

STREAM_BATCH = 10
STREAM_T = 11
STREAM_Z = 12
STREAM_WDR = 13

HISTORY_COLUMNS = ("step", "score_loss", "wdr_loss", "total", "grad_norm")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.2
    batch_size: int = 12
    num_iters: int = 2000
    ema_rate: float = 0.999
    learning_rate: float = 2e-4
    grad_clip: float = 1.0
    lambda_weighting: str = "sigma_squared"
    swd_projections: int = 100
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha = {self.alpha} outside [0, 1]")
        if not 0.0 <= self.ema_rate < 1.0:
            raise ConfigError("ema_rate must lie in [0, 1)")
        if self.batch_size < 1 or self.num_iters < 0 or self.swd_projections < 1:
            raise ConfigError("batch_size >= 1, num_iters >= 0, swd_projections >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.lambda_weighting != "sigma_squared":
            raise ConfigError(f"unsupported lambda_weighting {self.lambda_weighting!r}")


@dataclass
class Dataset:
    """Normalized targets (n, 1, H, W) and model-ready conditions (n, C, H, W)."""

    x0: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        if self.x0.ndim != 4 or self.y.ndim != 4 or self.x0.shape[0] != self.y.shape[0]:
            raise DimensionError(f"bad dataset shapes {self.x0.shape}, {self.y.shape}")

    def __len__(self):
        return self.x0.shape[0]

    @classmethod
    def from_pairs(cls, pairs: Sequence[tuple[GridField, ConditionTensor]], c_p: float = DEFAULT_CP):
        x0 = np.stack([normalize(t, c_p).values for t, _ in pairs])[:, None]
        y = np.stack([c.as_array(c_p) for _, c in pairs])
        return cls(x0, y)


# --- losses ----------------------------------------------------------------------


def score_matching_loss(model: ScoreModel, x0, y, t, z, eps_hat=None):
    """sigma^2-weighted denoising score matching, mean of (eps_hat - z)^2.

    With score = -eps_hat / sigma and target -z / sigma, the sigma(t)^2
    weighting turns the squared score error into the squared noise error.
    Returns (loss, xt, eps_hat) so the regularizer can reuse the forward pass.
    """
    sigma = model.sigma(t)[:, None, None, None]
    xt = x0 + sigma * z
    if eps_hat is None:
        eps_hat = model.eps_hat(xt, y, t)
    return torch.mean((eps_hat - z) ** 2), xt, eps_hat


def sliced_w1(a: torch.Tensor, b: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """Differentiable sliced W1 between equal-size point sets a, b of shape (m, d).

    Per projection the optimal 1-D coupling pairs order statistics; ties are
    broken by stable sort order.
    """
    if a.shape != b.shape:
        raise DimensionError(f"point sets differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    pa = torch.sort(a @ directions.T, dim=0, stable=True).values
    pb = torch.sort(b @ directions.T, dim=0, stable=True).values
    return torch.mean(torch.abs(pa - pb))


def wdr_loss(model: ScoreModel, x0, y, xt, t, directions, eps_hat=None):
    """Sliced W1 between one-step denoised estimates and the clean batch.

    x0_hat = xt + sigma^2 * score = xt - sigma * eps_hat; only x0_hat carries
    gradient.
    """
    m = x0.shape[0]
    if m < 2:
        raise ConfigError("the regularizer needs a batch of at least 2 fields")
    if eps_hat is None:
        eps_hat = model.eps_hat(xt, y, t)
    sigma = model.sigma(t)[:, None, None, None]
    x0_hat = xt - sigma * eps_hat
    return sliced_w1(x0_hat.reshape(m, -1), x0.detach().reshape(m, -1), directions)


def combined_loss(model: ScoreModel, x0, y, t, z, directions, alpha: float):
    """(1 - alpha) * score term + alpha * regularizer; returns (total, score, wdr).

    At alpha = 0 the regularizer is never evaluated and ``wdr`` is None.
    """
    s, xt, eps_hat = score_matching_loss(model, x0, y, t, z)
    if alpha == 0.0:
        return s, s, None
    w = wdr_loss(model, x0, y, xt, t, directions, eps_hat=eps_hat)
    if alpha == 1.0:
        return w, s, w
    return (1.0 - alpha) * s + alpha * w, s, w


# --- training loop -------------------------------------------------------------------


@dataclass
class TrainState:
    model: ScoreModel
    ema: list[torch.Tensor]
    optimizer: torch.optim.Optimizer
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def ema_flat(self) -> np.ndarray:
        return torch.cat([e.reshape(-1) for e in self.ema]).double().numpy()

    def ema_model(self) -> ScoreModel:
        """A copy of the model carrying the EMA parameters."""
        m = ScoreModel(self.model.arch, self.model.schedule, dtype=self.model.dtype, c_p=self.model.c_p)
        m.set_flat(self.ema_flat())
        return m


class BatchSampler:
    """Draws (indices, t, z, directions) from independent streams."""

    def __init__(self, seed: int, n: int, schedule: NoiseSchedule):
        self.n = n
        self.schedule = schedule
        self.rng_batch = stream(seed, STREAM_BATCH)
        self.rng_t = stream(seed, STREAM_T)
        self.rng_z = stream(seed, STREAM_Z)
        self.rng_wdr = stream(seed, STREAM_WDR)

    def draw(self, m: int, shape):
        idx = self.rng_batch.choice(self.n, size=m, replace=self.n < m)
        t = self.rng_t.uniform(self.schedule.eps, 1.0, size=m)
        z = self.rng_z.standard_normal((m, 1, *shape))
        return idx, t, z

    def directions(self, d: int, n: int) -> np.ndarray:
        return draw_directions(self.rng_wdr, d, n)


def init_state(cfg: TrainConfig, arch: Architecture, schedule: NoiseSchedule,
               dtype=torch.float32, c_p: float = DEFAULT_CP) -> TrainState:
    model = ScoreModel(arch, schedule, seed=cfg.seed, dtype=dtype, c_p=c_p)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate)
    ema = [p.detach().clone() for p in model.net.parameters()]
    return TrainState(model, ema, opt)


def ema_update(ema: Sequence[torch.Tensor], params, rate: float) -> None:
    with torch.no_grad():
        for e, p in zip(ema, params):
            e.mul_(rate).add_(p.detach(), alpha=1.0 - rate)


def train(
    data: Dataset,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    arch: Optional[Architecture] = None,
    out_dir=None,
    dtype=torch.float32,
    c_p: float = DEFAULT_CP,
    state: Optional[TrainState] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> TrainState:
    """Run ``cfg.num_iters`` Adam steps on the combined objective.

    Randomness for batches, times, noise and projection directions comes from
    separate streams; with alpha = 0 the direction stream is never touched.
    """
    arch = arch or Architecture(condition_channels=data.y.shape[1])
    if arch.condition_channels != data.y.shape[1]:
        raise ConfigError(
            f"architecture expects {arch.condition_channels} condition channels, data has {data.y.shape[1]}"
        )
    if cfg.alpha > 0 and cfg.batch_size < 2:
        raise ConfigError("alpha > 0 needs batch_size >= 2")
    state = state or init_state(cfg, arch, schedule, dtype, c_p)
    model = state.model
    sampler = BatchSampler(cfg.seed, len(data), schedule)
    shape = data.x0.shape[-2:]
    d = int(np.prod(shape))
    x0_all = torch.as_tensor(data.x0, dtype=dtype)
    y_all = torch.as_tensor(data.y, dtype=dtype)
    params = state.model.parameters
    out_dir = Path(out_dir) if out_dir is not None else None

    for _ in range(cfg.num_iters):
        idx, t_np, z_np = sampler.draw(cfg.batch_size, shape)
        idx_t = torch.as_tensor(idx)
        x0, y = x0_all[idx_t], y_all[idx_t]
        t = torch.as_tensor(t_np, dtype=dtype)
        z = torch.as_tensor(z_np, dtype=dtype)
        directions = None
        if cfg.alpha > 0:
            directions = torch.as_tensor(sampler.directions(d, cfg.swd_projections), dtype=dtype)
        state.optimizer.zero_grad(set_to_none=True)
        total, s, w = combined_loss(model, x0, y, t, z, directions, cfg.alpha)
        if not torch.isfinite(total):
            raise TrainingError("non-finite training loss", step=state.step)
        total.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        state.optimizer.step()
        ema_update(state.ema, params, cfg.ema_rate)
        state.step += 1
        rec = {
            "step": state.step,
            "score_loss": s.item(),
            "wdr_loss": w.item() if w is not None else 0.0,
            "total": total.item(),
            "grad_norm": float(gnorm),
        }
        state.history.append(rec)
        if on_step is not None:
            on_step(rec)
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"ckpt_{state.step:07d}.ckpt", model, state.step)
            save_checkpoint(out_dir / f"ckpt_{state.step:07d}_ema.ckpt", model, state.step,
                            ema=True, theta=state.ema_flat())
    if out_dir is not None:
        write_history(state.history, out_dir / "loss_history.csv")
    return state


def write_history(history, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        w.writeheader()
        w.writerows(history)
    return path
