"""Command-line entry point for the data, model, train, eval and bench commands.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

from . import benchmark as bench_mod
from .data import ANGLES, DESK_RANGES, FilterPolicy, PreparedDataset, load_manifest, make_synthetic_dataset, prepare_dataset
from .errors import ConfigError, UserError
from .evaluation import (
    PredictionSet,
    aggregate_runs,
    category_range_for,
    evaluate,
    write_report_csv,
    write_report_json,
)
from .model import CANONICAL, build_model, load_weights, resolve_config, save_weights
from .plots import heatmap_svg, loss_curve_svg, write_svg
from .training import TrainingConfig, desk_model, desk_scale, run_protocol

log = logging.getLogger("miniresnet")


def _jobs(args) -> int:
    env = os.environ.get("MINIRESNET_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"MINIRESNET_THREADS must be an integer, got {env!r}") from None
    return max(1, args.jobs)


def _fresh_dir(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------


def cmd_data_synth(args) -> int:
    out = Path(args.out or "synthetic")
    ranges = {"yaw": args.yaw_range, "pitch": args.pitch_range, "roll": args.roll_range}
    if args.desk_scale:
        ranges = dict(DESK_RANGES)
    manifest = make_synthetic_dataset(args.n, args.seed, args.size, out, ranges=ranges, noise_std=args.noise)
    print(f"wrote {args.n} samples to {manifest}")
    return 0


def _policy(args) -> FilterPolicy:
    return FilterPolicy(yaw_range=args.yaw_range, pitch_range=args.pitch_range, roll_range=args.roll_range,
                        afw_min_face_px=args.afw_min_face)


def cmd_data_prep(args) -> int:
    samples = load_manifest(args.manifest)
    out = Path(args.out or f"prepared-{args.size}")
    ds = prepare_dataset(samples, args.size, _policy(args))
    ds.save(out)
    stats = ds.stats
    _dump(stats, out / "stats.json")
    print(f"kept {stats['kept']} of {stats['total']} samples")
    for rule, n in stats["dropped"].items():
        print(f"  dropped {n:>6} by {rule}")
    print(f"prepared cache: {out}")
    return 0


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


def cmd_model_describe(args) -> int:
    print(build_model(resolve_config(args.config)).describe())
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _train_config(args) -> TrainingConfig:
    cfg = TrainingConfig.load(args.train_config) if args.train_config else TrainingConfig()
    if args.desk_scale:
        cfg = desk_scale(cfg, epochs=args.epochs or 60)
    overrides = {"seed": args.seed, "target_angle": args.angle}
    if args.epochs is not None and not args.desk_scale:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.checkpoint_every is not None:
        overrides["checkpoint_every"] = args.checkpoint_every
    return cfg.replace(**overrides)


def cmd_train(args) -> int:
    model_cfg = resolve_config(args.model)
    if args.desk_scale:
        model_cfg = desk_model(model_cfg)
    cfg = _train_config(args)
    datasets = [PreparedDataset.load(args.data)]
    if args.protocol in ("cycles", "train_test_x5"):
        if not args.test_data:
            raise ConfigError("--protocol cycles needs --test-data")
        datasets.append(PreparedDataset.load(args.test_data))
    out = _fresh_dir(Path(args.out or "runs"), args.force)
    result = run_protocol(
        args.protocol, datasets, model_cfg, cfg, folds=args.folds, repeats=args.repeats,
        jobs=_jobs(args), checkpoint_root=out if cfg.checkpoint_every else None,
    )
    curves = {}
    for run, preds in zip(result.runs, result.predictions):
        rdir = out / run.run_id
        rdir.mkdir(parents=True, exist_ok=True)
        run.write_loss_csv(rdir / "loss.csv")
        save_weights(run.network, rdir / "weights.bin")
        preds.save(rdir / "predictions.json")
        write_svg(loss_curve_svg({run.run_id: run.losses}, title=f"{run.run_id} training loss"), rdir / "loss.svg")
        curves[run.run_id] = run.losses
    write_svg(loss_curve_svg(curves, title=f"{result.protocol}: average training loss"), out / "loss_curves.svg")
    manifest = {
        "protocol": result.protocol,
        "desk_scale": bool(args.desk_scale),
        "model_config": model_cfg.to_dict(),
        "training_config": cfg.to_dict(),
        "datasets": [str(args.data)] + ([str(args.test_data)] if args.test_data else []),
        "runs": [r.run_id for r in result.runs],
    }
    _dump(manifest, out / "run_manifest.json")
    print(json.dumps({"protocol": result.protocol, "desk_scale": bool(args.desk_scale),
                      "model": model_cfg.name, "training_config": cfg.to_dict()}, sort_keys=True))
    print(f"wrote {len(result.runs)} runs to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    root = Path(args.runs)
    files = sorted(root.glob("*/predictions.json")) + sorted(root.glob("predictions.json"))
    if not files:
        raise ConfigError(f"no predictions.json files under {root}")
    sets = [PredictionSet.load(f) for f in files]
    crange = category_range_for(args.range)
    reports = [evaluate(s, crange) for s in sets]
    agg = aggregate_runs(reports)
    out = Path(args.out or root / "eval")
    out.mkdir(parents=True, exist_ok=True)
    write_report_json(agg, out / "report.json")
    write_report_csv(agg, out / "report.csv")
    if args.heatmap and agg.heatmap is not None:
        write_svg(heatmap_svg(agg.heatmap, title=f"{agg.angle} heatmap (mean of {len(reports)} runs)"), out / "heatmap.svg")
        (out / "heatmap.txt").write_text(agg.heatmap.to_text())
    print(f"{agg.angle}: MAE {agg.mae:.2f} deg, std {agg.std_dev:.2f} deg, "
          f"category {100 * agg.category_accuracy:.1f}%, +-15deg {100 * agg.tolerant_accuracy:.1f}% "
          f"over {len(reports)} run(s)")
    return 0


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def cmd_bench(args) -> int:
    configs = args.config or list(CANONICAL)
    networks = {}
    notes = []
    if args.weights:
        if len(configs) != 1:
            raise ConfigError("--weights applies to a single --config")
        cfg = resolve_config(configs[0])
        if Path(args.weights).exists():
            networks[cfg.name] = load_weights(args.weights, cfg)
        else:
            notes.append(f"weights file {args.weights} not found; benchmarking initialized (untrained) weights")
    threads = args.threads or 1
    results = bench_mod.benchmark_suite(configs, warmup=args.warmup, iters=args.iters, threads=threads,
                                        networks=networks)
    results.sort(key=lambda r: -r.fps)
    for n in notes:
        print(n, file=sys.stderr)
    print(bench_mod.results_table(results), end="")
    out = Path(args.out or "bench.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    bench_mod.write_results_csv(results, out)
    bench_mod.write_latencies_csv(results, out.with_name(out.stem + "_latencies.csv"))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None, help="output file or directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel runs (MINIRESNET_THREADS overrides)")
    common.add_argument("--desk-scale", action="store_true", help="apply the reduced desk-scale presets")
    common.add_argument("-v", "--verbose", action="store_true")

    filt = argparse.ArgumentParser(add_help=False)
    filt.add_argument("--yaw-range", type=float, default=100.0)
    filt.add_argument("--pitch-range", type=float, default=45.0)
    filt.add_argument("--roll-range", type=float, default=25.0)

    p = argparse.ArgumentParser(prog="miniresnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="synthetic data and preprocessing")
    dsub = data.add_subparsers(dest="data_command", required=True)
    synth = dsub.add_parser("synth", parents=[common], help="render a synthetic face dataset")
    synth.add_argument("--n", type=int, required=True)
    synth.add_argument("--size", type=int, default=64)
    synth.add_argument("--yaw-range", type=float, default=90.0)
    synth.add_argument("--pitch-range", type=float, default=30.0)
    synth.add_argument("--roll-range", type=float, default=20.0)
    synth.add_argument("--noise", type=float, default=0.01, help="background noise std (fraction of 255)")
    synth.set_defaults(func=cmd_data_synth)
    prep = dsub.add_parser("prep", parents=[common, filt], help="filter and preprocess a manifest")
    prep.add_argument("--manifest", required=True)
    prep.add_argument("--size", type=int, required=True)
    prep.add_argument("--afw-min-face", type=float, default=150.0)
    prep.set_defaults(func=cmd_data_prep)

    model = sub.add_parser("model", help="inspect architectures")
    msub = model.add_subparsers(dest="model_command", required=True)
    desc = msub.add_parser("describe", parents=[common], help="print the layer table and parameter count")
    desc.add_argument("config", help="JSON config path or one of: " + ", ".join(CANONICAL))
    desc.set_defaults(func=cmd_model_describe)

    tr = sub.add_parser("train", parents=[common], help="run a training protocol")
    tr.add_argument("--data", required=True, help="prepared dataset directory")
    tr.add_argument("--test-data", help="prepared test dataset (cycles protocol)")
    tr.add_argument("--protocol", choices=["cv5", "cycles", "train_test_x5"], default="cv5")
    tr.add_argument("--folds", type=int, default=5)
    tr.add_argument("--repeats", type=int, default=5)
    tr.add_argument("--model", default="resnet18-64", help="JSON config path or canonical name")
    tr.add_argument("--train-config", help="training config JSON")
    tr.add_argument("--angle", choices=ANGLES, default="yaw")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", type=int)
    tr.add_argument("--checkpoint-every", type=int)
    tr.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", parents=[common], help="evaluate stored predictions")
    ev.add_argument("--runs", required=True, help="directory holding <run>/predictions.json")
    ev.add_argument("--heatmap", action="store_true", help="also write heatmap.svg and heatmap.txt")
    ev.add_argument("--range", type=float, default=100.0, help="heatmap covers +-range degrees")
    ev.set_defaults(func=cmd_eval)

    be = sub.add_parser("bench", parents=[common], help="CPU inference fps")
    be.add_argument("--config", action="append", help="config path or canonical name (repeatable)")
    be.add_argument("--weights", help="weight file for a single --config")
    be.add_argument("--warmup", type=int, default=bench_mod.DEFAULT_WARMUP)
    be.add_argument("--iters", type=int, default=bench_mod.DEFAULT_ITERS)
    be.add_argument("--threads", type=int, default=1)
    be.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
