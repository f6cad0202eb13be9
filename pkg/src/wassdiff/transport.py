"""One-dimensional and sliced Wasserstein distances, plus KL/JS for comparison."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .errors import DimensionError, DomainError
from .rng import stream

KL_FLOOR = 1e-12
HIST_BINS = 128
STREAM_PROJ = 2


def _as_samples(x, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise DomainError(f"{name} is empty")
    if not np.all(np.isfinite(x)):
        raise DomainError(f"{name} contains non-finite values")
    return x


def wasserstein_1d(a, b) -> float:
    """W1 between two empirical distributions as the area between their CDFs.

    Works for samples of different sizes; each sample carries uniform mass.
    """
    a = np.sort(_as_samples(a, "a"))
    b = np.sort(_as_samples(b, "b"))
    if a.size == b.size:
        return math.fsum(np.abs(a - b)) / a.size
    grid = np.sort(np.concatenate([a, b]))
    widths = np.diff(grid)
    fa = np.searchsorted(a, grid[:-1], side="right") / a.size
    fb = np.searchsorted(b, grid[:-1], side="right") / b.size
    return math.fsum(np.abs(fa - fb) * widths)


@dataclass(frozen=True)
class EmpiricalBatch:
    """m points in R^d, one vectorized field per row."""

    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2:
            p = p.reshape(p.shape[0], -1)
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise DimensionError(f"empty batch {p.shape}")
        if not np.all(np.isfinite(p)):
            raise DomainError("batch contains non-finite values")
        object.__setattr__(self, "points", p)

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class ProjectionSet:
    vectors: np.ndarray
    seed: int | None = None

    @property
    def num_projections(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def draw_directions(rng: np.random.Generator, d: int, n: int) -> np.ndarray:
    """``n`` iid uniform directions on the unit sphere in R^d."""
    v = rng.standard_normal((n, d))
    norms = np.linalg.norm(v, axis=1)
    # zero-norm draws have probability zero, but never emit one
    while np.any(norms == 0):
        bad = norms == 0
        v[bad] = rng.standard_normal((int(bad.sum()), d))
        norms = np.linalg.norm(v, axis=1)
    return v / norms[:, None]


def sample_projections(d: int, n: int, seed: int) -> ProjectionSet:
    if d < 1 or n < 1:
        raise DomainError("d and N must be >= 1")
    return ProjectionSet(draw_directions(stream(seed, STREAM_PROJ), d, n), seed)


def sliced_wasserstein(A, B, proj: ProjectionSet) -> float:
    """Mean over projections of W1 between the projected point sets."""
    A = A if isinstance(A, EmpiricalBatch) else EmpiricalBatch(A)
    B = B if isinstance(B, EmpiricalBatch) else EmpiricalBatch(B)
    if not (A.dim == B.dim == proj.dim):
        raise DimensionError(f"dims differ: A {A.dim}, B {B.dim}, projections {proj.dim}")
    pa = A.points @ proj.vectors.T
    pb = B.points @ proj.vectors.T
    per = [wasserstein_1d(pa[:, i], pb[:, i]) for i in range(proj.num_projections)]
    return math.fsum(per) / proj.num_projections


# --- divergences -------------------------------------------------------------


def _check_hist(p, q):
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DimensionError(f"histograms on different bins: {p.shape} vs {q.shape}")
    return p, q


def kl_divergence(p, q) -> float:
    p, q = _check_hist(p, q)
    m = p > 0
    return float(np.sum(p[m] * np.log(p[m] / np.maximum(q[m], KL_FLOOR))))


def js_divergence(p, q) -> float:
    p, q = _check_hist(p, q)
    mid = 0.5 * (p + q)
    return 0.5 * kl_divergence(p, mid) + 0.5 * kl_divergence(q, mid)


def histograms(*samples, bins: int = HIST_BINS) -> list[np.ndarray]:
    """Normalized histograms of each sample on one shared uniform bin grid."""
    pooled = np.concatenate([np.ravel(s) for s in samples])
    edges = np.linspace(pooled.min(), pooled.max(), bins + 1)
    out = []
    for s in samples:
        h, _ = np.histogram(s, bins=edges)
        out.append(h / h.sum())
    return out


# --- tail-sensitivity fixture --------------------------------------------------


@dataclass(frozen=True)
class Mixture:
    """Two-component Gaussian mixture: a bulk mode plus a far tail component."""

    mode: float
    mode_sd: float
    tail: float
    tail_sd: float
    tail_weight: float

    def cdf(self, x):
        w = self.tail_weight
        return (1 - w) * norm.cdf(x, self.mode, self.mode_sd) + w * norm.cdf(
            x, self.tail, self.tail_sd
        )

    def quantile_sample(self, n: int = 4000) -> np.ndarray:
        """Deterministic n-point sample at the mid-quantiles (i + 0.5) / n."""
        lo = min(self.mode - 8 * self.mode_sd, self.tail - 8 * self.tail_sd)
        hi = max(self.mode + 8 * self.mode_sd, self.tail + 8 * self.tail_sd)
        xs = np.linspace(lo, hi, 200_001)
        cdf = self.cdf(xs)
        u = (np.arange(n) + 0.5) / n
        return np.interp(u, cdf, xs)


# Found by search_fixture(); see tests/test_transport.py for the re-run check.
TARGET = Mixture(mode=10.0, mode_sd=2.0, tail=60.0, tail_sd=6.0, tail_weight=0.1)
PRED_1 = Mixture(mode=12.0, mode_sd=2.0, tail=60.0, tail_sd=6.0, tail_weight=0.1)
PRED_2 = Mixture(mode=10.0, mode_sd=2.0, tail=60.0, tail_sd=6.0, tail_weight=0.0)


def score_triple(t: Mixture, p1: Mixture, p2: Mixture, n: int = 4000) -> dict[str, tuple[float, float]]:
    """Distances of P1 and P2 to T under W1, KL(P || T) and JS."""
    ts, s1, s2 = t.quantile_sample(n), p1.quantile_sample(n), p2.quantile_sample(n)
    ht, h1, h2 = histograms(ts, s1, s2)
    return {
        "wasserstein": (wasserstein_1d(s1, ts), wasserstein_1d(s2, ts)),
        "kl": (kl_divergence(h1, ht), kl_divergence(h2, ht)),
        "js": (js_divergence(h1, ht), js_divergence(h2, ht)),
    }


def ordering_holds(scores: dict[str, tuple[float, float]]) -> bool:
    w, kl, js = scores["wasserstein"], scores["kl"], scores["js"]
    return w[0] < w[1] and kl[0] > kl[1] and js[0] > js[1]


def search_fixture(
    shifts=(1.0, 2.0, 3.0),
    tail_locs=(40.0, 60.0),
    tail_weights=(0.05, 0.1, 0.2),
    n: int = 2000,
) -> list[tuple[float, Mixture, Mixture, Mixture]]:
    """Brute-force search for (T, P1, P2) with W favouring P1 and KL/JS favouring P2.

    T is a bulk mode plus a tail; P1 keeps the tail but shifts the mode; P2
    keeps the mode and drops the tail. Hits are returned sorted by the
    smallest relative margin across the three comparisons, best first.
    """
    hits = []
    for shift, tail, w in itertools.product(shifts, tail_locs, tail_weights):
        t = Mixture(10.0, 2.0, tail, 0.1 * tail, w)
        p1 = Mixture(10.0 + shift, 2.0, tail, 0.1 * tail, w)
        p2 = Mixture(10.0, 2.0, tail, 0.1 * tail, 0.0)
        s = score_triple(t, p1, p2, n)
        if ordering_holds(s):
            margin = min(
                (s["wasserstein"][1] - s["wasserstein"][0]) / s["wasserstein"][1],
                (s["kl"][0] - s["kl"][1]) / s["kl"][0],
                (s["js"][0] - s["js"][1]) / s["js"][0],
            )
            hits.append((margin, t, p1, p2))
    hits.sort(key=lambda h: -h[0])
    return hits


def tail_sensitivity_demo() -> dict[str, tuple[float, float]]:
    """Scores of the shipped fixture: metric -> (P1 vs T, P2 vs T)."""
    return score_triple(TARGET, PRED_1, PRED_2)

