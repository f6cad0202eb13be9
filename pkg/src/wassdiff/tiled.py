"""Tiled sampling: patchwise score evaluation merged with Gaussian weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DimensionError, StateError
from .grid import DEFAULT_CP, NORMALIZED, ConditionTensor, GridField
from .sde import NoiseSchedule, Observer, SamplerConfig, ScoreFn, run_pc

DEFAULT_PATCH = 256
DEFAULT_STRIDE = 192


def axis_offsets(n: int, patch: int, stride: int) -> list[int]:
    """0, stride, 2*stride, ...; the last offset is clamped to n - patch."""
    if patch > n:
        raise DimensionError(f"patch {patch} larger than image dimension {n}")
    if not 0 < stride <= patch:
        raise DimensionError(f"stride must satisfy 0 < stride <= patch, got {stride}")
    offs = []
    o = 0
    while True:
        if o + patch >= n:
            offs.append(n - patch)
            break
        offs.append(o)
        o += stride
    return sorted(set(offs))


@dataclass(frozen=True)
class PatchPlan:
    height: int
    width: int
    patch: int
    stride: int
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    @property
    def windows(self) -> list[tuple[int, int]]:
        return [(r, c) for r in self.rows for c in self.cols]

    def __len__(self):
        return len(self.rows) * len(self.cols)


def plan_patches(h: int, w: int, patch: int = DEFAULT_PATCH, stride: int = DEFAULT_STRIDE) -> PatchPlan:
    return PatchPlan(h, w, patch, stride, tuple(axis_offsets(h, patch, stride)),
                     tuple(axis_offsets(w, patch, stride)))


def gaussian_window(patch: int, std: Optional[float] = None) -> np.ndarray:
    """Separable Gaussian bump peaking at the patch centre; std defaults to patch / 4."""
    std = patch / 4 if std is None else std
    c = (patch - 1) / 2
    g = np.exp(-0.5 * ((np.arange(patch) - c) / std) ** 2)
    return np.outer(g, g)


@dataclass(frozen=True)
class BlendKernel:
    """Per-patch weight maps, already divided by the per-pixel weight total."""

    window: np.ndarray
    weights: tuple[np.ndarray, ...]
    total: np.ndarray

    def coverage(self, plan: PatchPlan) -> np.ndarray:
        """Per-pixel sum of the normalized weights (1 everywhere)."""
        acc = np.zeros((plan.height, plan.width))
        p = plan.patch
        for (r, c), w in zip(plan.windows, self.weights):
            acc[r : r + p, c : c + p] += w
        return acc


def blend_kernel(plan: PatchPlan, std: Optional[float] = None) -> BlendKernel:
    win = gaussian_window(plan.patch, std)
    p = plan.patch
    total = np.zeros((plan.height, plan.width))
    for r, c in plan.windows:
        total[r : r + p, c : c + p] += win
    weights = tuple(win / total[r : r + p, c : c + p] for r, c in plan.windows)
    return BlendKernel(win, weights, total)


def merge_step(outputs: Sequence[np.ndarray], plan: PatchPlan, kernel: BlendKernel) -> np.ndarray:
    """Weighted average of per-patch arrays (..., patch, patch) onto the full grid."""
    if len(outputs) != len(plan):
        raise StateError(f"expected {len(plan)} patch outputs, got {len(outputs)}")
    lead = np.shape(outputs[0])[:-2]
    merged = np.zeros(lead + (plan.height, plan.width))
    p = plan.patch
    for (r, c), w, out in zip(plan.windows, kernel.weights, outputs):
        if out is None:
            raise StateError(f"missing output for patch at ({r}, {c})")
        merged[..., r : r + p, c : c + p] += w * out
    return merged


def tiled_score_fn(score_fn: ScoreFn, plan: PatchPlan, kernel: BlendKernel) -> ScoreFn:
    """Wrap a score function so it is evaluated per patch and merged."""
    p = plan.patch

    def fn(x, t, y):
        outs = []
        for r, c in plan.windows:
            yp = None if y is None else y[..., r : r + p, c : c + p]
            outs.append(score_fn(x[..., r : r + p, c : c + p], t, yp))
        return merge_step(outs, plan, kernel)

    return fn


def tiled_pc_sample(
    score_fn: ScoreFn,
    y: Optional[ConditionTensor],
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    plan: PatchPlan,
    kernel: Optional[BlendKernel] = None,
    observer: Optional[Observer] = None,
    shape: Optional[tuple[int, int]] = None,
    c_p: float = DEFAULT_CP,
) -> list[GridField]:
    """PC sampling where every score evaluation is patchwise and merged.

    Noise is drawn once per step on the full grid, so overlapping patches see
    identical noise and a pointwise score reproduces full-frame sampling.
    """
    if shape is None:
        shape = y.shape if y is not None else (plan.height, plan.width)
    shape = tuple(shape)
    if shape != (plan.height, plan.width):
        raise DimensionError(f"plan covers {(plan.height, plan.width)}, field is {shape}")
    kernel = kernel or blend_kernel(plan)
    y_arr = None if y is None else y.as_array(c_p)
    cell = 1.0 if y is None else y.channels[0].cell_km
    out = run_pc(tiled_score_fn(score_fn, plan, kernel), y_arr, shape, schedule, cfg, observer, c_p)
    return [GridField(v, NORMALIZED, cell, "1") for v in out]
