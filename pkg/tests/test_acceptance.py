"""Acceptance suite: one PASS/FAIL line per criterion, printed in the run summary.

Run alone with ``pytest tests/test_acceptance.py -s``.
"""

import math
import time

import numpy as np
import torch

from wassdiff import metrics as mt
from wassdiff import transport as tp
from wassdiff.cli import main
from wassdiff.experiment import ExperimentConfig, bias_trace_experiment, toy_gaussian_dataset
from wassdiff.grid import SyntheticPairConfig, generate_dataset
from wassdiff.scorenet import Architecture, ScoreModel
from wassdiff.sde import GaussianScore, NoiseSchedule, SamplerConfig, pc_sample
from wassdiff.tiled import blend_kernel, plan_patches, tiled_pc_sample
from wassdiff.training import Dataset, TrainConfig, combined_loss, score_matching_loss, train

from reference import brute_force_w1, cdf_area_quadrature, crps_by_quadrature, plain_score_matching_run

SCHED = NoiseSchedule()


def test_c01_transport_oracle(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 8))
        a, b = rng.normal(0, 3, n), rng.exponential(2, n)
        worst = max(worst, abs(tp.wasserstein_1d(a, b) - brute_force_w1(a, b)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10
    criterion(1, ok, f"W1 vs n! pairings, 200 cases, max err {worst:.2e} (tol 1e-9), {elapsed:.2f}s (< 10s)")
    assert ok


def test_c02_sliced_reduction(criterion):
    rng = np.random.default_rng(102)
    worst = 0.0
    for i in range(100):
        n = int(rng.integers(1, 200))
        a, b = rng.normal(size=(n, 1)), rng.gamma(2.0, size=(n, 1))
        proj = tp.sample_projections(1, int(rng.integers(1, 50)), seed=i)
        worst = max(worst, abs(tp.sliced_wasserstein(a, b, proj) - tp.wasserstein_1d(a[:, 0], b[:, 0])))
    ok = worst <= 1e-12
    criterion(2, ok, f"d=1 sliced == W1, 100 cases, max err {worst:.2e} (tol 1e-12)")
    assert ok


def test_c03_cdf_area(criterion):
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(50):
        na, nb = rng.integers(1, 60, size=2)
        while na == nb:
            nb = rng.integers(1, 60)
        a, b = rng.normal(0, 2, na), rng.exponential(3, nb)
        worst = max(worst, abs(tp.wasserstein_1d(a, b) - cdf_area_quadrature(a, b, 100_000)))
    ok = worst <= 1e-4
    criterion(3, ok, f"unequal-length W1 vs 1e5-point CDF quadrature, 50 cases, max err {worst:.2e} (tol 1e-4)")
    assert ok


def test_c04_gradient_exactness(criterion):
    t0 = time.perf_counter()
    model = ScoreModel(Architecture(hidden_channels=16, condition_channels=3), SCHED, seed=104,
                       dtype=torch.float64)
    # the output conv starts at zero, which would zero every interior gradient
    with torch.no_grad():
        model.net.out.weight.uniform_(-0.1, 0.1, generator=torch.Generator().manual_seed(104))
    theta = model.get_flat()
    rng = np.random.default_rng(104)
    g = torch.Generator().manual_seed(104)
    m, size = 4, 16
    x0 = torch.rand(m, 1, size, size, generator=g, dtype=torch.float64)
    y = torch.rand(m, 3, size, size, generator=g, dtype=torch.float64)
    t = torch.rand(m, generator=g, dtype=torch.float64) * 0.8 + 0.1
    z = torch.randn(m, 1, size, size, generator=g, dtype=torch.float64)
    dirs = torch.as_tensor(tp.sample_projections(size * size, 100, seed=104).vectors)
    total, _, _ = combined_loss(model, x0, y, t, z, dirs, 0.2)
    grad = torch.cat([q.reshape(-1) for q in torch.autograd.grad(total, model.parameters)]).numpy()

    def loss_at(th):
        model.set_flat(th)
        with torch.no_grad():
            return combined_loss(model, x0, y, t, z, dirs, 0.2)[0].item()

    h = 1e-5
    worst = 0.0
    for i in rng.choice(theta.size, 60, replace=False):
        tp_, tm = theta.copy(), theta.copy()
        tp_[i] += h
        tm[i] -= h
        fd = (loss_at(tp_) - loss_at(tm)) / (2 * h)
        worst = max(worst, abs(grad[i] - fd) / max(abs(grad[i]), abs(fd), 1e-10))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 120
    criterion(4, ok, f"combined_loss grad vs central FD, 60 params of {theta.size}, max rel err {worst:.2e} "
                     f"(tol 1e-4), {elapsed:.1f}s (< 120s)")
    assert ok


def test_c05_sampler_calibration(criterion):
    t0 = time.perf_counter()
    mu, sd = 0.4, 0.3
    fn = GaussianScore(mu, sd, SCHED)
    full = np.stack([f.values for f in pc_sample(fn, None, SCHED, SamplerConfig(ensemble_size=64, seed=5),
                                                  shape=(16, 16))])
    pred = np.stack([f.values for f in pc_sample(fn, None, SCHED,
                                                  SamplerConfig(ensemble_size=64, langevin_steps=0, seed=6),
                                                  shape=(16, 16))])
    se = sd / math.sqrt(full.size)
    elapsed = time.perf_counter() - t0
    ok_mean = abs(full.mean() - mu) <= 3 * se
    ok_std = abs(full.std() - sd) <= 0.1 * sd
    ok_pred = abs(pred.mean() - mu) <= 3 * se
    ok = ok_mean and ok_std and ok_pred and elapsed < 120
    criterion(5, ok, f"PC mean {full.mean():.4f} (target {mu} +- {3 * se:.4f}), std {full.std():.4f} "
                     f"(target {sd} +- 10%), predictor-only mean {pred.mean():.4f}, {elapsed:.1f}s (< 120s)")
    assert ok


def test_c06_learned_score(criterion):
    t0 = time.perf_counter()
    sd = 0.1
    data, mu = toy_gaussian_dataset(n=256, size=16, sd=sd, seed=0)
    cfg = TrainConfig(alpha=0.0, num_iters=2000, learning_rate=1e-3, seed=0)
    state = train(data, cfg, SCHED, Architecture(hidden_channels=32, condition_channels=2))
    model = state.ema_model()
    # held-out loss on fresh draws
    held, _ = toy_gaussian_dataset(n=1024, size=16, sd=sd, seed=1)
    g = np.random.default_rng(106)
    t = torch.as_tensor(g.uniform(SCHED.eps, 1.0, 1024), dtype=torch.float32)
    z = torch.as_tensor(g.standard_normal(held.x0.shape), dtype=torch.float32)
    with torch.no_grad():
        loss, _, _ = score_matching_loss(model, torch.as_tensor(held.x0, dtype=torch.float32),
                                         torch.as_tensor(held.y, dtype=torch.float32), t, z)
    init_loss = np.mean([h["score_loss"] for h in state.history[:20]])
    # score correlation at t = eps on held-out noisy points
    x = held.x0[:32, 0] + SCHED.sigma(SCHED.eps) * g.standard_normal((32, 16, 16))
    learned = model.score_fn()(x, SCHED.eps, held.y[0])
    exact = GaussianScore(mu, sd, SCHED)(x, SCHED.eps)
    corr = float(np.corrcoef(learned.ravel(), exact.ravel())[0, 1])
    elapsed = time.perf_counter() - t0
    ok = loss.item() < 0.5 and corr > 0.95 and elapsed < 600
    criterion(6, ok, f"toy task: held-out loss {loss.item():.3f} (< 0.5, from {init_loss:.3f}), "
                     f"score corr at t=eps {corr:.4f} (> 0.95), {elapsed:.0f}s (< 600s)")
    assert ok


def test_c07_wdr_directional(criterion):
    t0 = time.time()
    w1_wins = tail_wins = 0
    for seed in range(5):
        cfg = ExperimentConfig(
            data=SyntheticPairConfig(fine_size=32, tail_heaviness=1.0, seed=seed),
            train=TrainConfig(num_iters=2000, seed=seed),
            sampler=SamplerConfig(ensemble_size=4, seed=seed),
        )
        runs = bias_trace_experiment(cfg)["runs"]
        base, wdr = runs[0.0], runs[0.2]
        w1_wins += wdr.w1 <= base.w1
        tail_wins += wdr.q999_error <= base.q999_error
        print(f"seed {seed}: W1 {base.w1:.3f} -> {wdr.w1:.3f}, "
              f"|q999 err| {base.q999_error:.2f} -> {wdr.q999_error:.2f}")
    minutes = (time.time() - t0) / 60
    ok = w1_wins >= 4 and tail_wins >= 4 and minutes < 60
    criterion(7, ok, f"WDR W1 <= baseline in {w1_wins}/5 seeds, tail error in {tail_wins}/5, {minutes:.1f} min")
    assert ok


def test_c08_metric_oracles(criterion):
    rng = np.random.default_rng(108)
    crps_err = 0.0
    for _ in range(200):
        m = int(rng.integers(1, 9))
        members, y = rng.exponential(10, m), float(rng.exponential(10))
        crps_err = max(crps_err, abs(mt.crps(members.reshape(m, 1, 1), np.array([[y]]))
                                     - crps_by_quadrature(members, y)))
    hand = mt.crps(np.array([[[0.0]], [[2.0]]]), np.array([[1.0]]))
    f1_err = 0.0
    for _ in range(200):
        p, o = rng.random((16, 16)) < 0.3, rng.random((16, 16)) < 0.3
        tp_, fp, fn = int(np.sum(p & o)), int(np.sum(p & ~o)), int(np.sum(~p & o))
        f1 = 2 * tp_ / (2 * tp_ + fp + fn)
        f1_err = max(f1_err, abs(mt.csi(p * 20.0, o * 20.0, pool_km=1.0) - f1 / (2 - f1)))
    obs, pred = np.zeros((4, 4)), np.zeros((4, 4))
    obs.flat[:5], pred.flat[:3] = 60.0, 60.0
    hrre_ok = mt.hrre(pred, obs) == 2 and mt.hrre(obs, obs) == 0
    base = np.sort(rng.uniform(0, 40, 2000))
    base[1997:] = 100.0
    o2 = base.reshape(40, 50)
    p2 = np.where(o2 == 100.0, 80.0, o2)
    mppe_ok = mt.mppe(p2, o2) == 20.0 and mt.mppe(2 * o2, o2) == mt.quantile(o2, 0.999) and mt.mppe(o2, o2) == 0
    ok = crps_err <= 1e-6 and hand == 0.5 and f1_err <= 1e-12 and hrre_ok and mppe_ok
    criterion(8, ok, f"CRPS vs quadrature max err {crps_err:.1e} (tol 1e-6), {{0,2}}/1 -> {hand}, "
                     f"CSI-f1 max err {f1_err:.1e} (tol 1e-12), HRRE {'ok' if hrre_ok else 'bad'}, "
                     f"MPPE {'ok' if mppe_ok else 'bad'}")
    assert ok


def test_c09_tiled_equivalence(criterion):
    t0 = time.perf_counter()
    plan = plan_patches(512, 512, 256, 192)
    kernel = blend_kernel(plan)
    coverage_err = float(np.max(np.abs(kernel.coverage(plan) - 1.0)))
    fn = GaussianScore(0.3, 0.4, SCHED)
    cfg = SamplerConfig(num_steps=100, ensemble_size=1, seed=9)
    full = pc_sample(fn, None, SCHED, cfg, shape=(512, 512))[0].values
    tiled = tiled_pc_sample(fn, None, SCHED, cfg, plan, kernel)[0].values
    diff = float(np.max(np.abs(full - tiled)))
    elapsed = time.perf_counter() - t0
    ok = diff <= 1e-5 and coverage_err <= 1e-12 and elapsed < 300
    criterion(9, ok, f"512x512 tiled vs full-frame max abs diff {diff:.2e} (tol 1e-5), weight map err "
                     f"{coverage_err:.1e} (tol 1e-12), {elapsed:.1f}s (< 300s)")
    assert ok


def test_c10_fixture_ordering(criterion, capsys, tmp_path):
    t0 = time.perf_counter()
    scores = tp.tail_sensitivity_demo()
    rc = main(["distance-demo", "--out-dir", str(tmp_path)])
    out = capsys.readouterr().out
    elapsed = time.perf_counter() - t0
    ok = tp.ordering_holds(scores) and rc == 0 and out.startswith("metric,P1_vs_T,P2_vs_T") and elapsed < 1
    w, kl, js = scores["wasserstein"], scores["kl"], scores["js"]
    criterion(10, ok, f"W(P1,T)={w[0]:.3g} < W(P2,T)={w[1]:.3g}; KL {kl[0]:.3g} > {kl[1]:.3g}; "
                      f"JS {js[0]:.3g} > {js[1]:.3g}; distance-demo exit {rc}, {elapsed:.2f}s (< 1s)")
    assert ok


def test_c11_baseline_bit_compatibility(criterion):
    pairs = generate_dataset(SyntheticPairConfig(fine_size=32, seed=11), 16)
    data = Dataset.from_pairs(pairs)
    arch = Architecture(hidden_channels=16, condition_channels=data.y.shape[1])
    cfg = TrainConfig(alpha=0.0, num_iters=25, seed=11, learning_rate=1e-3)
    state = train(data, cfg, SCHED, arch)
    flat, ema, losses = plain_score_matching_run(data, cfg, SCHED, arch)
    same_params = np.array_equal(state.model.get_flat(), flat)
    same_ema = np.array_equal(state.ema_flat(), ema)
    same_loss = [h["score_loss"] for h in state.history] == losses
    ok = same_params and same_ema and same_loss
    criterion(11, ok, f"alpha=0 vs regularizer-free loop, 25 steps: params {'identical' if same_params else 'DIFFER'}, "
                      f"EMA {'identical' if same_ema else 'DIFFER'}, losses {'identical' if same_loss else 'DIFFER'}")
    assert ok


def test_c12_end_to_end_smoke(criterion, tmp_path):
    import csv
    import json

    t0 = time.perf_counter()
    cfg_path = tmp_path / "smoke.json"
    cfg_path.write_text(json.dumps({
        "data": {"num_samples": 32, "fine_size": 32},
        "train": {"num_iters": 500, "learning_rate": 1e-3},
        "sampler": {"ensemble_size": 4},
    }))
    cfg = str(cfg_path)
    train_dir, run, obs, pred = (tmp_path / n for n in ("train", "run", "obs", "pred"))
    codes = [main(["gen-data", "--config", cfg, "--out-dir", str(train_dir)])]
    codes.append(main(["train", "--config", cfg, "--data-dir", str(train_dir), "--out-dir", str(run)]))
    # held-out observations come from a different data seed
    obs_cfg = tmp_path / "obs.json"
    obs_cfg.write_text(json.dumps({"data": {"num_samples": 2, "fine_size": 32, "seed": 99}}))
    codes.append(main(["gen-data", "--config", str(obs_cfg), "--out-dir", str(obs)]))
    for name in ("sample_0000", "sample_0001"):
        codes.append(main(["sample", "--config", cfg, "--checkpoint", str(run / "model_ema.ckpt"),
                           "--condition", str(obs / name / "condition"), "--out-dir", str(pred / name)]))
    out_csv = tmp_path / "report" / "metrics.csv"
    codes.append(main(["evaluate", "--config", cfg, "--pred-dir", str(pred), "--obs-dir", str(obs),
                       "--out", str(out_csv)]))
    elapsed = time.perf_counter() - t0
    populated = False
    summary = {}
    if out_csv.exists():
        rows = list(csv.DictReader(open(out_csv)))
        summary = next((r for r in rows if r["sample"] == "mean"), {})
        populated = all(math.isfinite(float(summary.get(k, "nan"))) for k in ("mae", "csi", "hrre", "mppe", "crps"))
    ok = all(c == 0 for c in codes) and populated and elapsed < 300
    shown = ", ".join(f"{k}={float(summary[k]):.3g}" for k in ("mae", "csi", "hrre", "mppe", "crps")) if populated else "-"
    criterion(12, ok, f"gen-data/train 500/sample/evaluate exit codes {codes}; {shown}; {elapsed:.0f}s (< 300s)")
    assert ok
