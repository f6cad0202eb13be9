"""Command-line entry point: ``wassdiff <command> ...``.

Exit codes: 1 configuration error, 2 I/O error, 3 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from . import grid, metrics, transport
from .config import RunConfig, load_config, write_effective
from .errors import (
    ConfigError,
    DimensionError,
    DomainError,
    FormatError,
    NumericError,
    ParseError,
    StateError,
)
from .grid import GridField, read_condition, read_grid, write_condition, write_grid
from .scorenet import load_checkpoint, save_checkpoint
from .sde import pc_sample
from .tiled import blend_kernel, plan_patches, tiled_pc_sample
from .training import Dataset, train

log = logging.getLogger("wassdiff")

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3


# --- dataset layout ----------------------------------------------------------------
# <dir>/manifest.json
# <dir>/sample_0000/target.{grid,json}
# <dir>/sample_0000/condition/condition.json + cond_XX_<role>.{grid,json}


def write_dataset(pairs, out_dir: Path, cfg: RunConfig) -> Path:
    names = []
    for i, (target, cond) in enumerate(pairs):
        name = f"sample_{i:04d}"
        write_grid(target, out_dir / name / "target")
        write_condition(cond, out_dir / name / "condition")
        names.append(name)
    manifest = {
        "samples": names,
        "shape": list(pairs[0][0].shape),
        "condition_roles": list(pairs[0][1].roles),
        "seed": cfg.data.seed,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def sample_dirs(root: Path) -> list[Path]:
    manifest = root / "manifest.json"
    if manifest.exists():
        try:
            names = json.loads(manifest.read_text())["samples"]
        except (ValueError, KeyError) as exc:
            raise ParseError(f"malformed manifest {manifest}: {exc}") from None
        return [root / n for n in names]
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise FileNotFoundError(f"no sample directories under {root}")
    return dirs


def read_dataset(root: Path):
    return [(read_grid(d / "target"), read_condition(d / "condition")) for d in sample_dirs(root)]


def read_members(d: Path) -> list[GridField]:
    """Ensemble members of one sample: ``member_*.grid`` or, failing that, ``target.grid``."""
    members = sorted(d.glob("member_*.grid"))
    if members:
        return [read_grid(p) for p in members]
    if (d / "target.grid").exists():
        return [read_grid(d / "target")]
    raise FileNotFoundError(f"no member grids in {d}")


# --- commands ----------------------------------------------------------------------


def cmd_gen_data(args, cfg: RunConfig):
    out = Path(args.out_dir)
    write_effective(cfg, out, command="gen-data")
    pairs = grid.generate_dataset(cfg.pair_config(), cfg.data.num_samples)
    write_dataset(pairs, out, cfg)
    print(f"wrote {len(pairs)} pairs to {out}")


def cmd_train(args, cfg: RunConfig):
    out = Path(args.out_dir)
    if not (args.data_dir or cfg.paths.data_dir):
        raise ConfigError("train needs --data-dir or paths.data_dir")
    data_dir = Path(args.data_dir or cfg.paths.data_dir)
    write_effective(cfg, out, command="train", data_dir=str(data_dir))
    pairs = read_dataset(data_dir)
    data = Dataset.from_pairs(pairs, cfg.data.c_p)
    tcfg = cfg.train_config()
    arch = cfg.architecture(data.y.shape[1])
    t0 = time.time()

    def progress(rec):
        if rec["step"] % max(1, tcfg.num_iters // 10) == 0:
            print(f"step {rec['step']:>6d}  score {rec['score_loss']:.4f}  wdr {rec['wdr_loss']:.4f}"
                  f"  ({time.time() - t0:.0f}s)", flush=True)

    state = train(data, tcfg, cfg.noise_schedule(), arch, out_dir=out,
                  dtype=cfg.torch_dtype(), c_p=cfg.data.c_p, on_step=progress)
    save_checkpoint(out / "model.ckpt", state.model, state.step)
    save_checkpoint(out / "model_ema.ckpt", state.model, state.step, ema=True, theta=state.ema_flat())
    print(f"trained {state.step} steps; checkpoints in {out}")


def _sample(args, cfg: RunConfig, tiled: bool):
    out = Path(args.out_dir)
    m = args.ensemble or cfg.sampler.ensemble_size
    if tiled:
        cfg = cfg.model_copy(update={"tiled": cfg.tiled.model_copy(
            update={"patch": args.patch or cfg.tiled.patch, "stride": args.stride or cfg.tiled.stride})})
    write_effective(cfg, out, command="tiled-sample" if tiled else "sample",
                    checkpoint=args.checkpoint, condition=args.condition, ensemble=m)
    model, header = load_checkpoint(args.checkpoint)
    cond = read_condition(args.condition)
    scfg = cfg.sampler_config(m)
    if tiled:
        plan = plan_patches(*cond.shape, cfg.tiled.patch, cfg.tiled.stride)
        kernel = blend_kernel(plan, cfg.tiled.kernel_std)
        fields = tiled_pc_sample(model.score_fn(), cond, model.schedule, scfg, plan, kernel, c_p=model.c_p)
    else:
        fields = pc_sample(model.score_fn(), cond, model.schedule, scfg, c_p=model.c_p)
    for i, f in enumerate(fields):
        write_grid(grid.denormalize(f, model.c_p), out / f"member_{i:03d}")
    print(f"wrote {len(fields)} members to {out}")


def cmd_sample(args, cfg):
    _sample(args, cfg, tiled=False)


def cmd_tiled_sample(args, cfg):
    _sample(args, cfg, tiled=True)


def cmd_evaluate(args, cfg: RunConfig):
    out_csv = Path(args.out)
    write_effective(cfg, out_csv.parent, command="evaluate", pred_dir=args.pred_dir, obs_dir=args.obs_dir)
    mc = cfg.metrics
    obs_root, pred_root = Path(args.obs_dir), Path(args.pred_dir)
    report = metrics.MetricReport(thresholds={
        "csi_threshold": mc.csi_threshold, "pool_km": mc.pool_km,
        "heavy_threshold": mc.heavy_threshold, "peak_quantile": mc.peak_quantile,
    })
    for d in sample_dirs(obs_root):
        obs = read_grid(d / "target")
        members = read_members(pred_root / d.name)
        row = metrics.evaluate_sample(members, obs, mc.csi_threshold, mc.pool_km,
                                      mc.heavy_threshold, mc.peak_quantile)
        report.rows.append({"sample": d.name, "members": len(members), **row})
    summary = report.summary()
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "members", *metrics.METRIC_NAMES])
        for r in report.rows:
            w.writerow([r["sample"], r["members"], *(f"{r[k]:.6g}" for k in metrics.METRIC_NAMES)])
        w.writerow(["mean", "", *(f"{summary[k][0]:.6g}" for k in metrics.METRIC_NAMES)])
        w.writerow(["std", "", *(f"{summary[k][1]:.6g}" for k in metrics.METRIC_NAMES)])
    print("  ".join(f"{k}={summary[k][0]:.4g}±{summary[k][1]:.3g}" for k in metrics.METRIC_NAMES))


def cmd_qq(args, cfg: RunConfig):
    out_csv = Path(args.out)
    write_effective(cfg, out_csv.parent, command="qq", ensemble_dir=args.ensemble_dir, obs=args.obs)
    members = read_members(Path(args.ensemble_dir))
    limit = args.ensemble or cfg.metrics.qq_ensemble
    members = members[:limit]
    curve = metrics.qq_curve(members, read_grid(args.obs))
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["percentile", "observed", "mean", "std",
                    *(f"member_{i:03d}" for i in range(len(members)))])
        for j, p in enumerate(curve.percentiles):
            w.writerow([int(p), f"{curve.observed[j]:.6g}", f"{curve.mean[j]:.6g}",
                        f"{curve.std[j]:.6g}", *(f"{v:.6g}" for v in curve.members[:, j])])
    print(f"wrote Q-Q data for {len(members)} members to {out_csv}")


def cmd_distance_demo(args, cfg: RunConfig):
    out = Path(args.out_dir)
    write_effective(cfg, out, command="distance-demo")
    scores = transport.tail_sensitivity_demo()
    rows = [["metric", "P1_vs_T", "P2_vs_T"]]
    rows += [[name, f"{a:.6g}", f"{b:.6g}"] for name, (a, b) in scores.items()]
    with open(out / "distance_demo.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(rows)
    csv.writer(sys.stdout).writerows(rows)
    verdict = "holds" if transport.ordering_holds(scores) else "FAILS"
    print(f"W1 favours P1 while KL and JS favour P2: {verdict}")


def cmd_bias_experiment(args, cfg: RunConfig):
    from .experiment import ExperimentConfig, bias_trace_experiment

    out = Path(args.out_dir)
    write_effective(cfg, out, command="bias-experiment")
    ex = cfg.experiment
    ecfg = ExperimentConfig(
        data=cfg.pair_config(),
        num_train=ex.num_train,
        num_eval=ex.num_eval,
        train=cfg.train_config(),
        sampler=cfg.sampler_config(ex.ensemble_size),
        schedule=cfg.noise_schedule(),
        arch=cfg.architecture(2 + cfg.data.num_ancillary),
        alphas=tuple(ex.alphas),
        c_p=cfg.data.c_p,
    )
    report = bias_trace_experiment(ecfg)
    summary = {}
    with open(out / "traces.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alpha", "member", "step", "t", "mean_intensity"])
        for alpha, run in report["runs"].items():
            for i, trace in enumerate(run.traces):
                for k, (t, mu) in enumerate(zip(run.times, trace)):
                    w.writerow([alpha, i, k, f"{t:.6g}", f"{mu:.6g}"])
            summary[str(alpha)] = {"w1": run.w1, "q999_error": run.q999_error,
                                   "sample_mean": float(run.samples.mean())}
    summary["target_mean"] = float(report["targets"].mean())
    (out / "report.json").write_text(json.dumps(summary, indent=2))
    for alpha, s in summary.items():
        print(alpha, s)


# --- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wassdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON run configuration")
        sp.set_defaults(func=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "write synthetic (target, condition) pairs")
    sp.add_argument("--out-dir", required=True)

    sp = add("train", cmd_train, "train a score model")
    sp.add_argument("--data-dir")
    sp.add_argument("--out-dir", required=True)

    for name, fn in (("sample", cmd_sample), ("tiled-sample", cmd_tiled_sample)):
        sp = add(name, fn, "draw an ensemble for one condition")
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--condition", required=True, help="condition directory or its condition.json")
        sp.add_argument("--ensemble", type=int)
        sp.add_argument("--out-dir", required=True)
        if name == "tiled-sample":
            sp.add_argument("--patch", type=int, default=None, help="patch size (default 256)")
            sp.add_argument("--stride", type=int, default=None, help="stride (default 192)")

    sp = add("evaluate", cmd_evaluate, "metric report against observations")
    sp.add_argument("--pred-dir", required=True)
    sp.add_argument("--obs-dir", required=True)
    sp.add_argument("--out", required=True)

    sp = add("qq", cmd_qq, "Q-Q curve data for one ensemble")
    sp.add_argument("--ensemble-dir", required=True)
    sp.add_argument("--obs", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--ensemble", type=int)

    sp = add("distance-demo", cmd_distance_demo, "W1 vs KL/JS on the tail fixture")
    sp.add_argument("--out-dir", default=".")

    sp = add("bias-experiment", cmd_bias_experiment, "matched alpha=0 / alpha>0 runs")
    sp.add_argument("--out-dir", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.func(args, cfg)
    except (ConfigError, DomainError, DimensionError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
