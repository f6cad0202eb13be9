"""Compact conditional score network and its checkpoint format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DimensionError, DomainError, NumericError, ParseError, StateError
from .grid import DEFAULT_CP, NORMALIZED, ConditionTensor, GridField
from .rng import stream
from .sde import NoiseSchedule

STREAM_INIT = 5
CKPT_MAGIC = b"WDCK"


@dataclass(frozen=True)
class Architecture:
    hidden_channels: int = 32
    depth: int = 2
    time_embed_dim: int = 32
    condition_channels: int = 3


def _groups(ch: int) -> int:
    """Largest group count in 8, 4, 2 leaving at least 4 channels per group."""
    for g in (8, 4, 2):
        if ch % g == 0 and ch // g >= 4:
            return g
    return 1


class TimeEmbedding(nn.Module):
    """Sinusoidal features of t on a geometric frequency ladder, then a small MLP."""

    def __init__(self, dim: int, max_freq: float = 100.0):
        super().__init__()
        if dim < 2 or dim % 2:
            raise ValueError("time_embed_dim must be even and >= 2")
        freqs = torch.exp(torch.linspace(0.0, math.log(max_freq), dim // 2))
        self.register_buffer("freqs", freqs, persistent=False)
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def features(self, t: torch.Tensor) -> torch.Tensor:
        arg = t[:, None] * self.freqs.to(t.dtype)[None, :]
        return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)

    def forward(self, t):
        return self.fc2(F.silu(self.fc1(self.features(t))))


class Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, t_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.temb = nn.Linear(t_dim, c_out)
        self.norm1 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else None

    def forward(self, x, temb):
        # the time shift goes in after normalization, which would otherwise remove it
        h = F.silu(self.norm1(self.conv1(x)) + self.temb(temb)[:, :, None, None])
        h = F.silu(self.norm2(self.conv2(h)))
        return h + (x if self.skip is None else self.skip(x))


class ScoreUNet(nn.Module):
    """Three-resolution encoder-decoder predicting the noise ``eps_hat``."""

    def __init__(self, arch: Architecture):
        super().__init__()
        c, c2, td = arch.hidden_channels, 2 * arch.hidden_channels, arch.time_embed_dim
        self.embed = TimeEmbedding(td)
        self.inp = nn.Conv2d(1 + arch.condition_channels, c, 3, padding=1)
        self.enc0 = Block(c, c, td)
        self.down1 = nn.Conv2d(c, c2, 3, stride=2, padding=1)
        self.enc1 = Block(c2, c2, td)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = nn.ModuleList(Block(c2, c2, td) for _ in range(max(arch.depth, 1)))
        self.up1 = nn.Conv2d(c2, c2, 3, padding=1)
        self.dec1 = Block(2 * c2, c2, td)
        self.up0 = nn.Conv2d(c2, c, 3, padding=1)
        self.dec0 = Block(2 * c, c, td)
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out = nn.Conv2d(c, 1, 3, padding=1)

    def forward(self, x, y, t):
        temb = self.embed(t)
        h0 = self.enc0(self.inp(torch.cat([x, y], dim=1)), temb)
        h1 = self.enc1(self.down1(h0), temb)
        h = self.down2(h1)
        for blk in self.mid:
            h = blk(h, temb)
        h = self.up1(F.interpolate(h, size=h1.shape[-2:], mode="nearest"))
        h = self.dec1(torch.cat([h, h1], dim=1), temb)
        h = self.up0(F.interpolate(h, size=h0.shape[-2:], mode="nearest"))
        h = self.dec0(torch.cat([h, h0], dim=1), temb)
        return self.out(F.silu(self.out_norm(h)))


def init_parameters(net: nn.Module, seed: int) -> None:
    """Fan-in scaled uniform weights, zero biases, zero-initialized output layer."""
    gen = torch.Generator().manual_seed(int(stream(seed, STREAM_INIT).integers(2**62)))
    with torch.no_grad():
        for mod in net.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                mod.weight.copy_(
                    (torch.rand(mod.weight.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
                )
                if mod.bias is not None:
                    mod.bias.zero_()
        net.out.weight.zero_()
        net.out.bias.zero_()


class ScoreModel:
    """s_theta(x, y, t) = -eps_hat(x, y, t) / sigma(t) on top of :class:`ScoreUNet`."""

    def __init__(
        self,
        arch: Architecture,
        schedule: NoiseSchedule,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
        c_p: float = DEFAULT_CP,
    ):
        self.arch = arch
        self.schedule = schedule
        self.dtype = dtype
        self.c_p = c_p
        self.net = ScoreUNet(arch).to(dtype)
        init_parameters(self.net, seed)
        self._record = None

    # -- parameters --

    @property
    def parameters(self) -> list[torch.Tensor]:
        return list(self.net.parameters())

    @property
    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def get_flat(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.net.parameters()]).double().numpy()

    def set_flat(self, theta) -> None:
        theta = np.array(theta, dtype=np.float64)
        if theta.size != self.num_parameters:
            raise DimensionError(f"expected {self.num_parameters} parameters, got {theta.size}")
        self._record = None  # a recorded graph refers to the old values
        off = 0
        with torch.no_grad():
            for p in self.net.parameters():
                n = p.numel()
                p.copy_(torch.from_numpy(theta[off : off + n].reshape(p.shape)).to(p.dtype))
                off += n

    # -- tensor interface --

    def sigma(self, t: torch.Tensor) -> torch.Tensor:
        s = self.schedule
        return s.sigma_min * (s.sigma_max / s.sigma_min) ** t

    def eps_hat(self, x, y, t):
        """x (B, 1, H, W), y (B, C, H, W), t (B,)."""
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise DimensionError(f"field dims {tuple(x.shape[-2:])} must be multiples of 4")
        if y.shape[1] != self.arch.condition_channels:
            raise DimensionError(
                f"model expects {self.arch.condition_channels} condition channels, got {y.shape[1]}"
            )
        return self.net(x, y, t)

    def score(self, x, y, t):
        return -self.eps_hat(x, y, t) / self.sigma(t)[:, None, None, None]

    # -- GridField interface with explicit backward --

    def forward(self, x: GridField, y: ConditionTensor, t: float) -> GridField:
        if not 0.0 <= t <= 1.0:
            raise DomainError(f"t = {t} outside [0, 1]")
        xv = np.array(x.values)
        yv = np.array(y.as_array(self.c_p))
        if not (np.all(np.isfinite(xv)) and np.all(np.isfinite(yv))):
            raise NumericError("NaN or inf in score-model input")
        if xv.shape != yv.shape[1:]:
            raise DimensionError(f"x {xv.shape} vs condition {yv.shape[1:]}")
        xt = torch.as_tensor(xv, dtype=self.dtype)[None, None]
        yt = torch.as_tensor(yv, dtype=self.dtype)[None]
        tt = torch.full((1,), t, dtype=self.dtype)
        self.net.zero_grad(set_to_none=True)
        out = self.score(xt, yt, tt)
        self._record = out
        return GridField(out.detach()[0, 0].double().numpy(), NORMALIZED, x.cell_km, "1")

    def backward(self, upstream) -> np.ndarray:
        """Gradient of <upstream, forward output> with respect to the flat parameters."""
        if self._record is None:
            raise StateError("backward called without a recorded forward pass")
        out, self._record = self._record, None
        up = torch.as_tensor(np.asarray(upstream, dtype=np.float64), dtype=out.dtype)
        grads = torch.autograd.grad(out, self.parameters, grad_outputs=up.reshape(out.shape))
        return torch.cat([g.reshape(-1) for g in grads]).double().numpy()

    # -- sampler adapter --

    def score_fn(self):
        """Callable ``(x (M, H, W), t, y (C, H, W)) -> score`` for the PC sampler."""

        def fn(x, t, y):
            with torch.no_grad():
                xt = torch.as_tensor(x, dtype=self.dtype)[:, None]
                yt = torch.as_tensor(y, dtype=self.dtype)[None].expand(x.shape[0], -1, -1, -1)
                tt = torch.full((x.shape[0],), float(t), dtype=self.dtype)
                return self.score(xt, yt, tt)[:, 0].double().numpy()

        return fn


# --- checkpoints -----------------------------------------------------------------


def save_checkpoint(path, model: ScoreModel, step: int = 0, ema: bool = False, theta=None) -> Path:
    """Write header length (u64 LE), a JSON header, then float64 LE parameters."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    theta = model.get_flat() if theta is None else np.asarray(theta, dtype=np.float64)
    header = {
        "architecture": asdict(model.arch),
        "schedule": {"sigma_min": model.schedule.sigma_min, "sigma_max": model.schedule.sigma_max,
                     "eps": model.schedule.eps},
        "step": int(step),
        "ema": bool(ema),
        "c_p": model.c_p,
        "num_parameters": int(theta.size),
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<Q", len(blob)) + blob)
        fh.write(theta.astype("<f8").tobytes())
    return path


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> tuple[ScoreModel, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC or len(raw) < 12:
        raise ParseError(f"{path} is not a checkpoint")
    (n,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12 : 12 + n])
        arch = Architecture(**header["architecture"])
        schedule = NoiseSchedule(**header["schedule"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"bad checkpoint header in {path}: {exc}") from exc
    theta = np.frombuffer(raw[12 + n :], dtype="<f8")
    model = ScoreModel(arch, schedule, dtype=dtype, c_p=header.get("c_p", DEFAULT_CP))
    if theta.size != model.num_parameters:
        raise ParseError(f"{path}: payload has {theta.size} values, architecture needs {model.num_parameters}")
    model.set_flat(theta)
    return model, header
