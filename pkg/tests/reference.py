"""Independent oracles shared by the unit and acceptance suites."""

import itertools

import numpy as np
import torch

from wassdiff.rng import stream
from wassdiff.scorenet import ScoreModel


def brute_force_w1(a, b):
    """Minimum mean transport cost over all pairings of two equal-size samples."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return min(np.abs(a - b[list(p)]).mean() for p in itertools.permutations(range(len(b))))


def cdf_area_quadrature(a, b, n=100_000):
    """Midpoint-rule integral of |F_a - F_b| on a dense uniform grid."""
    a, b = np.sort(a), np.sort(b)
    lo, hi = min(a[0], b[0]), max(a[-1], b[-1])
    h = (hi - lo) / n
    x = lo + (np.arange(n) + 0.5) * h
    fa = np.searchsorted(a, x, side="right") / a.size
    fb = np.searchsorted(b, x, side="right") / b.size
    return float(np.sum(np.abs(fa - fb)) * h)


def crps_by_quadrature(members, y):
    """Integral of (F(x) - 1{x >= y})^2, exact on each constant piece."""
    members = np.sort(np.asarray(members, float))
    knots = np.unique(np.concatenate([members, [y]]))
    lo, hi = knots[0] - 1.0, knots[-1] + 1.0
    edges = np.concatenate([[lo], knots, [hi]])
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b)
        f = np.mean(members <= mid)
        total += (f - float(mid >= y)) ** 2 * (b - a)
    return total


def plain_score_matching_run(data, cfg, schedule, arch, dtype=torch.float32):
    """Denoising score matching with no regularizer anywhere in the loop.

    Reuses only the network and the documented stream layout
    (batch 10, times 11, noise 12); returns (params, ema, losses).
    """
    model = ScoreModel(arch, schedule, seed=cfg.seed, dtype=dtype)
    params = list(model.net.parameters())
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    ema = [p.detach().clone() for p in params]
    r_idx, r_t, r_z = stream(cfg.seed, 10), stream(cfg.seed, 11), stream(cfg.seed, 12)
    n = data.x0.shape[0]
    shape = data.x0.shape[-2:]
    x0_all = torch.as_tensor(data.x0, dtype=dtype)
    y_all = torch.as_tensor(data.y, dtype=dtype)
    losses = []
    for _ in range(cfg.num_iters):
        idx = torch.as_tensor(r_idx.choice(n, size=cfg.batch_size, replace=n < cfg.batch_size))
        t = torch.as_tensor(r_t.uniform(schedule.eps, 1.0, size=cfg.batch_size), dtype=dtype)
        z = torch.as_tensor(r_z.standard_normal((cfg.batch_size, 1, *shape)), dtype=dtype)
        x0, y = x0_all[idx], y_all[idx]
        sigma = schedule.sigma_min * (schedule.sigma_max / schedule.sigma_min) ** t
        xt = x0 + sigma[:, None, None, None] * z
        opt.zero_grad(set_to_none=True)
        loss = torch.mean((model.net(xt, y, t) - z) ** 2)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        with torch.no_grad():
            for e, p in zip(ema, params):
                e.mul_(cfg.ema_rate).add_(p.detach(), alpha=1.0 - cfg.ema_rate)
        losses.append(loss.item())
    flat = torch.cat([p.detach().reshape(-1) for p in params]).double().numpy()
    ema_flat = torch.cat([e.reshape(-1) for e in ema]).double().numpy()
    return flat, ema_flat, losses
