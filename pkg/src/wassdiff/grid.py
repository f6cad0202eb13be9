"""Gridded fields, unit conversion, synthetic coarse/fine pairs and file I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .rng import streams
from .errors import ConfigError, DimensionError, DomainError, FormatError, NumericError, ParseError, StateError

PHYSICAL = "physical"
NORMALIZED = "normalized"
SPACES = (PHYSICAL, NORMALIZED)

ROLES = ("coarse_precip", "station_density", "ancillary")

DEFAULT_CP = 5.0
STREAM_DATA = 1


@dataclass(frozen=True)
class GridField:
    """A 2-D field of intensities.

    ``values`` is an (H, W) float64 array in mm/day when ``space`` is
    ``"physical"`` and dimensionless when ``"normalized"``.
    """

    values: np.ndarray
    space: str = PHYSICAL
    cell_km: float = 1.0
    units: str = "mm/day"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.size == 0:
            raise DimensionError(f"GridField needs a non-empty 2-D array, got shape {v.shape}")
        if self.space not in SPACES:
            raise StateError(f"unknown space tag {self.space!r}")
        if not np.all(np.isfinite(v)):
            raise DomainError("GridField values must be finite")
        if self.space == PHYSICAL and v.min() < 0:
            raise DomainError("physical GridField values must be >= 0")
        if self.cell_km <= 0:
            raise DomainError("cell_km must be positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values: np.ndarray, space: str | None = None) -> "GridField":
        return replace(self, values=values, space=space or self.space)


@dataclass(frozen=True)
class ConditionTensor:
    channels: tuple[GridField, ...]
    roles: tuple[str, ...]

    def __post_init__(self):
        channels = tuple(self.channels)
        roles = tuple(self.roles)
        if len(channels) != len(roles):
            raise DimensionError("one role per channel required")
        if any(r not in ROLES for r in roles):
            raise ConfigError(f"unknown channel role in {roles}")
        if roles.count("coarse_precip") > 1:
            raise ConfigError("at most one coarse_precip channel")
        shapes = {c.shape for c in channels}
        if len(shapes) > 1:
            raise DimensionError(f"condition channels disagree on shape: {shapes}")
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "roles", roles)

    @property
    def shape(self) -> tuple[int, int]:
        return self.channels[0].shape

    def __len__(self):
        return len(self.channels)

    def as_array(self, c_p: float = DEFAULT_CP) -> np.ndarray:
        """Stack channels into a (C, H, W) model input.

        Physical-space precipitation is log-normalized; every other channel is
        passed through unchanged.
        """
        out = []
        for ch, role in zip(self.channels, self.roles):
            if role == "coarse_precip" and ch.space == PHYSICAL:
                ch = normalize(ch, c_p)
            out.append(ch.values)
        return np.stack(out)


@dataclass(frozen=True)
class SyntheticPairConfig:
    fine_size: int = 32
    coarsen_factor: int = 8
    tail_heaviness: float = 1.0
    smoothness: float = 3.0
    seed: int = 0
    num_ancillary: int = 1
    dry_fraction: float = 0.4
    scale: float = 8.0
    cell_km: float = 1.0

    def validate(self) -> None:
        if self.fine_size < 1 or self.coarsen_factor < 2:
            raise ConfigError("fine_size must be >= 1 and coarsen_factor >= 2")
        if self.fine_size % self.coarsen_factor:
            raise ConfigError(
                f"fine_size {self.fine_size} not divisible by coarsen_factor {self.coarsen_factor}"
            )
        if self.tail_heaviness < 0 or self.smoothness <= 0 or self.scale <= 0:
            raise ConfigError("tail_heaviness >= 0, smoothness > 0 and scale > 0 required")
        if not 0 <= self.dry_fraction < 1:
            raise ConfigError("dry_fraction must be in [0, 1)")
        if self.num_ancillary < 0:
            raise ConfigError("num_ancillary must be >= 0")


def normalize(f: GridField, c_p: float = DEFAULT_CP) -> GridField:
    """Zero-preserving log transform ``log(v + 1) / c_p``."""
    if f.space != PHYSICAL:
        raise StateError("normalize expects a physical field")
    if c_p <= 0:
        raise DomainError("c_p must be positive")
    return f.with_values(np.log1p(f.values) / c_p, NORMALIZED)


def denormalize(f: GridField, c_p: float = DEFAULT_CP) -> GridField:
    if f.space != NORMALIZED:
        raise StateError("denormalize expects a normalized field")
    if c_p <= 0:
        raise DomainError("c_p must be positive")
    with np.errstate(over="ignore"):
        v = np.maximum(np.expm1(c_p * f.values), 0.0)
    if not np.all(np.isfinite(v)):
        raise NumericError(f"denormalized intensity overflows (max normalized value {f.values.max():.3g})")
    return f.with_values(v, PHYSICAL)


def denormalize_array(v: np.ndarray, c_p: float = DEFAULT_CP) -> np.ndarray:
    """Array form of :func:`denormalize`; saturates near 1e300 so sums and means stay finite."""
    top = 690.0
    return np.maximum(np.expm1(np.minimum(c_p * np.asarray(v, dtype=np.float64), top)), 0.0)


def coarsen(f: GridField, factor: int) -> GridField:
    h, w = f.shape
    if factor < 1 or h % factor or w % factor:
        raise DimensionError(f"shape {f.shape} not divisible by factor {factor}")
    blocks = f.values.reshape(h // factor, factor, w // factor, factor)
    return replace(f, values=blocks.mean(axis=(1, 3)), cell_km=f.cell_km * factor)


def _axis_weights(n_src: int, n_dst: int):
    if n_dst == 1 or n_src == 1:
        pos = np.zeros(n_dst)
    else:
        pos = np.arange(n_dst) * ((n_src - 1) / (n_dst - 1))
    lo = np.minimum(np.floor(pos).astype(int), n_src - 1)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    return lo, hi, frac


def upsample_bilinear(f: GridField, target_h: int, target_w: int) -> GridField:
    """Corner-aligned bilinear interpolation onto a larger grid."""
    h, w = f.shape
    if target_h < h or target_w < w:
        raise DimensionError(f"cannot upsample {f.shape} to ({target_h}, {target_w})")
    r0, r1, fr = _axis_weights(h, target_h)
    c0, c1, fc = _axis_weights(w, target_w)
    v = f.values
    top = v[r0][:, c0] * (1 - fc) + v[r0][:, c1] * fc
    bot = v[r1][:, c0] * (1 - fc) + v[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    if f.space == PHYSICAL:
        out = np.maximum(out, 0.0)
    return replace(f, values=out, cell_km=f.cell_km * h / target_h)


def gaussian_random_field(rng: np.random.Generator, size: int, corr_len: float) -> np.ndarray:
    """Standardized periodic Gaussian random field with the given correlation length."""
    white = rng.standard_normal((size, size))
    g = gaussian_filter(white, sigma=corr_len, mode="wrap")
    std = g.std()
    return (g - g.mean()) / std if std > 0 else g - g.mean()


def generate_pair(cfg: SyntheticPairConfig, index: int = 0) -> tuple[GridField, ConditionTensor]:
    """Draw one synthetic (target, condition) pair.

    The target is ``scale * exp(tail_heaviness * g)`` for a standardized
    Gaussian random field ``g``, with the lowest ``dry_fraction`` of pixels
    set to zero. ``index`` selects an independent draw for the same seed.
    """
    cfg.validate()
    n = cfg.fine_size
    rngs = streams(cfg.seed, 1 + cfg.num_ancillary, STREAM_DATA, index)
    g = gaussian_random_field(rngs[0], n, cfg.smoothness)
    vals = cfg.scale * np.exp(cfg.tail_heaviness * g)
    if cfg.dry_fraction > 0:
        cut = np.quantile(vals, cfg.dry_fraction)
        vals = np.where(vals < cut, 0.0, vals)
    target = GridField(vals, PHYSICAL, cfg.cell_km)

    coarse = coarsen(target, cfg.coarsen_factor)
    up = upsample_bilinear(coarse, n, n)
    channels = [replace(up, cell_km=cfg.cell_km)]
    roles = ["coarse_precip"]
    channels.append(GridField(np.ones((n, n)), PHYSICAL, cfg.cell_km, units="count"))
    roles.append("station_density")
    for rng in rngs[1:]:
        a = gaussian_random_field(rng, n, 2 * cfg.smoothness)
        lo, hi = a.min(), a.max()
        a = (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)
        channels.append(GridField(a, NORMALIZED, cfg.cell_km, units="1"))
        roles.append("ancillary")
    return target, ConditionTensor(tuple(channels), tuple(roles))


def generate_dataset(cfg: SyntheticPairConfig, n: int) -> list[tuple[GridField, ConditionTensor]]:
    return [generate_pair(cfg, i) for i in range(n)]


# --- file I/O --------------------------------------------------------------


def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".grid", ".json") else p


def write_grid(f: GridField, path) -> Path:
    """Write ``<stem>.grid`` (float32 LE, row-major) and ``<stem>.json``."""
    stem = _stem(path)
    if np.max(np.abs(f.values)) > np.finfo(np.float32).max:
        raise NumericError(f"{stem}: values exceed the float32 range of the grid format")
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".grid").write_bytes(f.values.astype("<f4").tobytes())
    header = {
        "height": f.height,
        "width": f.width,
        "space": f.space,
        "cell_km": f.cell_km,
        "units": f.units,
    }
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2))
    return stem


def read_grid(path) -> GridField:
    stem = _stem(path)
    text = stem.with_suffix(".json").read_text()
    try:
        header = json.loads(text)
        h, w = int(header["height"]), int(header["width"])
        space = header["space"]
        cell_km = float(header.get("cell_km", 1.0))
        units = str(header.get("units", "mm/day"))
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed grid header {stem}.json: {exc}") from exc
    if h <= 0 or w <= 0 or space not in SPACES:
        raise ParseError(f"invalid grid header {stem}.json")
    payload = stem.with_suffix(".grid").read_bytes()
    if len(payload) != h * w * 4:
        raise FormatError(
            f"{stem}.grid holds {len(payload)} bytes, header expects {h}x{w}x4 = {h * w * 4}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)
    return GridField(values, space, cell_km, units)


def write_condition(cond: ConditionTensor, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (ch, role) in enumerate(zip(cond.channels, cond.roles)):
        name = f"cond_{i:02d}_{role}"
        write_grid(ch, d / name)
        entries.append({"file": name, "role": role})
    (d / "condition.json").write_text(json.dumps({"channels": entries}, indent=2))
    return d


def read_condition(path) -> ConditionTensor:
    p = Path(path)
    manifest = p if p.suffix == ".json" else p / "condition.json"
    try:
        spec = json.loads(manifest.read_text())
        entries = spec["channels"]
        chans = [read_grid(manifest.parent / e["file"]) for e in entries]
        roles = [e["role"] for e in entries]
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(f"malformed condition manifest {manifest}: {exc}") from exc
    return ConditionTensor(tuple(chans), tuple(roles))


def stack_fields(fields: Sequence[GridField]) -> np.ndarray:
    return np.stack([f.values for f in fields])
