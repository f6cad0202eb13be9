"""Verification metrics on physical-space (mm/day) fields."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, DomainError, StateError
from .grid import PHYSICAL, GridField

CSI_THRESHOLD = 10.0
POOL_KM = 16.0
HEAVY_THRESHOLD = 56.0
PEAK_QUANTILE = 0.999


def _physical(f) -> np.ndarray:
    if isinstance(f, GridField):
        if f.space != PHYSICAL:
            raise StateError("metrics expect physical-space fields")
        return f.values
    return np.asarray(f, dtype=np.float64)


def _pair(pred, obs):
    p, o = _physical(pred), _physical(obs)
    if p.shape != o.shape:
        raise DimensionError(f"pred {p.shape} vs obs {o.shape}")
    return p, o


def mae(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.mean(np.abs(p - o)))


def bias(pred, obs) -> float:
    p, o = _pair(pred, obs)
    return float(np.mean(p - o))


def max_pool(mask: np.ndarray, k: int) -> np.ndarray:
    """Block max over k x k windows; partial windows at the edges are kept."""
    if k == 1:
        return mask
    h, w = mask.shape
    hp, wp = -(-h // k) * k, -(-w // k) * k
    padded = np.zeros((hp, wp), dtype=bool)
    padded[:h, :w] = mask
    return padded.reshape(hp // k, k, wp // k, k).any(axis=(1, 3))


def pool_factor(cell_km: float, pool_km: float) -> int:
    k = pool_km / cell_km
    if k < 1 or abs(k - round(k)) > 1e-9:
        raise DimensionError(f"cell size {cell_km} km does not divide pooling scale {pool_km} km")
    return int(round(k))


def confusion(pred_mask, obs_mask):
    tp = int(np.sum(pred_mask & obs_mask))
    fp = int(np.sum(pred_mask & ~obs_mask))
    fn = int(np.sum(~pred_mask & obs_mask))
    return tp, fp, fn


def csi(pred, obs, threshold: float = CSI_THRESHOLD, pool_km: float = POOL_KM,
        cell_km: float | None = None) -> float:
    """Pooled critical success index TP / (TP + FP + FN).

    Exceedance masks are max-pooled to ``pool_km`` before counting. FP is a
    predicted exceedance that was not observed. Returns 1 when nothing
    exceeds in either field.
    """
    p, o = _pair(pred, obs)
    if cell_km is None:
        cell_km = obs.cell_km if isinstance(obs, GridField) else 1.0
    k = pool_factor(cell_km, pool_km)
    tp, fp, fn = confusion(max_pool(p >= threshold, k), max_pool(o >= threshold, k))
    denom = tp + fp + fn
    return 1.0 if denom == 0 else tp / denom


def hrre(pred, obs, threshold: float = HEAVY_THRESHOLD) -> int:
    """Absolute difference in heavy-rain pixel counts."""
    p, o = _pair(pred, obs)
    return abs(int(np.sum(o > threshold)) - int(np.sum(p > threshold)))


def quantile(values, q) -> np.ndarray:
    """Empirical quantile, linear between order statistics, inclusive ends."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("quantile of an empty field")
    return np.quantile(v, q, method="linear")


def mppe(pred, obs, q: float = PEAK_QUANTILE) -> float:
    p, o = _pair(pred, obs)
    return float(abs(quantile(p, q) - quantile(o, q)))


def _members(ens) -> np.ndarray:
    if isinstance(ens, np.ndarray):
        arr = ens.astype(np.float64)
        return arr[None] if arr.ndim == 2 else arr
    if len(ens) == 0:
        raise DomainError("empty ensemble")
    return np.stack([_physical(m) for m in ens])


def crps_pointwise(ens, obs) -> np.ndarray:
    """Per-pixel CRPS of the empirical ensemble CDF.

    Uses E|X - y| - 0.5 E|X - X'|; the pairwise term is computed from sorted
    members in O(M log M).
    """
    x = _members(ens)
    o = _physical(obs)
    if x.shape[1:] != o.shape:
        raise DimensionError(f"ensemble {x.shape[1:]} vs obs {o.shape}")
    m = x.shape[0]
    skill = np.mean(np.abs(x - o[None]), axis=0)
    xs = np.sort(x, axis=0)
    # sum_{i,j} |x_i - x_j| = 2 sum_i (2i - m + 1) x_(i), 0-based order statistics
    coef = (2 * np.arange(m) - m + 1).reshape((m,) + (1,) * o.ndim)
    spread = 2 * np.sum(coef * xs, axis=0)
    return skill - spread / (2 * m * m)


def crps(ens, obs) -> float:
    return float(np.mean(crps_pointwise(ens, obs)))


@dataclass
class QQCurve:
    percentiles: np.ndarray
    members: np.ndarray  # (M, P)
    observed: np.ndarray  # (P,)

    @property
    def mean(self) -> np.ndarray:
        return self.members.mean(axis=0)

    @property
    def std(self) -> np.ndarray:
        return self.members.std(axis=0)


def qq_curve(ens, obs, percentiles=None) -> QQCurve:
    """Quantiles of each member and of the observation at integer percentiles."""
    pct = np.arange(101) if percentiles is None else np.asarray(percentiles)
    x = _members(ens)
    o = _physical(obs)
    q = pct / 100.0
    members = np.stack([quantile(m, q) for m in x])
    return QQCurve(pct, members, quantile(o, q))


# --- report ---------------------------------------------------------------------

METRIC_NAMES = ("mae", "bias", "csi", "hrre", "mppe", "crps")


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    thresholds: dict = field(default_factory=dict)

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for k in METRIC_NAMES:
            vals = np.array([r[k] for r in self.rows], dtype=np.float64)
            out[k] = (float(vals.mean()), float(vals.std())) if len(vals) else (math.nan, math.nan)
        return out


def evaluate_sample(members: Sequence, obs: GridField, threshold: float = CSI_THRESHOLD,
                    pool_km: float = POOL_KM, heavy: float = HEAVY_THRESHOLD,
                    q: float = PEAK_QUANTILE) -> dict:
    """All metrics for one observation and its ensemble.

    MAE and bias use the ensemble mean; CSI, HRRE and MPPE are averaged over
    members, since a mean field smooths away exactly the extremes they score.
    """
    x = _members(members)
    mean = x.mean(axis=0)
    cell = obs.cell_km if isinstance(obs, GridField) else 1.0
    return {
        "mae": mae(mean, obs),
        "bias": bias(mean, obs),
        "csi": float(np.mean([csi(m, obs, threshold, pool_km, cell) for m in x])),
        "hrre": float(np.mean([hrre(m, obs, heavy) for m in x])),
        "mppe": float(np.mean([mppe(m, obs, q) for m in x])),
        "crps": crps(x, obs),
    }
