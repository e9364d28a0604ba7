"""Command-line entry points.

Subcommands: ``train``, ``eval``, ``schedules``, ``sensitivity``, ``curve``,
and ``gen-data``. Every command exits 0 on success and nonzero with a
one-line reason otherwise. ``FOLDNET_SEED`` overrides the configured
trainer seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, run_config_from_dict
from .data import generate_dataset
from .evaluation import (
    evaluate_across_schedules,
    evaluate_model,
    drop_layers,
    layer_sensitivity,
)
from .folding import (
    FoldableEncoder,
    count_schedules,
    enumerate_schedules,
    parse_mask,
    parse_schedule,
    validate_schedule,
)
from .training import METRICS_HEADER, train


def _apply_env_seed(cfg: RunConfig) -> RunConfig:
    env = os.environ.get("FOLDNET_SEED")
    if env is None:
        return cfg
    try:
        seed = int(env)
    except ValueError:
        raise ConfigError(f"FOLDNET_SEED must be an integer, got {env!r}")
    return replace(cfg, trainer=replace(cfg.trainer, seed=seed))


def _history_digest(rows: list[dict]) -> str:
    blob = json.dumps(rows, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _load_eval_setup(args):
    """Checkpoint plus the dev/test split regenerated from its config echo."""
    model, meta = load_checkpoint(args.ckpt)
    if args.config:
        run_cfg = load_run_config(args.config)
    elif "run_config" in meta:
        run_cfg = run_config_from_dict(meta["run_config"])
    else:
        raise ConfigError(
            "checkpoint carries no run_config echo; pass --config")
    _, dev, test = generate_dataset(run_cfg.data)
    split = dev if getattr(args, "split", "dev") == "dev" else test
    return model, meta, run_cfg, split


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    run_cfg = _apply_env_seed(load_run_config(args.config))
    out_dir = run_cfg.output_dir
    os.makedirs(out_dir, exist_ok=True)
    train_set, dev_set, _ = generate_dataset(run_cfg.data)

    last_path = os.path.join(out_dir, "last.ckpt")
    metrics_path = os.path.join(out_dir, "metrics.csv")
    start_step = 0
    prior_rows: list[dict] = []
    if os.path.exists(last_path):
        model, meta = load_checkpoint(last_path)
        start_step = int(meta.get("step", 0))
        if model.config != run_cfg.model:
            raise ConfigError(
                "config invalid: model section conflicts with resume checkpoint")
        if os.path.exists(metrics_path):
            with open(metrics_path, newline="", encoding="utf-8") as fh:
                prior_rows = list(csv.DictReader(fh))
        print(f"resuming from {last_path} at step {start_step}")
    else:
        model = FoldableEncoder.build(
            run_cfg.model, np.random.default_rng(run_cfg.trainer.seed))

    if start_step >= run_cfg.trainer.steps:
        print(f"nothing to do: checkpoint already at step {start_step}")
        return 0

    rows = list(prior_rows)
    best = {"err": float("inf")}

    metrics_fh = open(metrics_path, "w", newline="", encoding="utf-8")
    writer = csv.writer(metrics_fh)
    writer.writerow(METRICS_HEADER)
    for row in prior_rows:
        writer.writerow([row[k] for k in METRICS_HEADER])
    metrics_fh.flush()

    def on_log(row: dict, current: FoldableEncoder) -> None:
        rows.append(row)
        writer.writerow([row[k] for k in METRICS_HEADER])
        metrics_fh.flush()
        meta = {"step": row["step"], "history_digest": _history_digest(rows),
                "run_config": run_cfg.to_dict()}
        save_checkpoint(current, meta, last_path)
        if row["dev_err_max"] < best["err"]:
            best["err"] = row["dev_err_max"]
            save_checkpoint(current, meta, os.path.join(out_dir, "best.ckpt"))

    try:
        history = train(model, train_set, dev_set, run_cfg.trainer,
                        start_step=start_step, on_log=on_log)
    finally:
        metrics_fh.close()
    final_meta = {"step": run_cfg.trainer.steps,
                  "history_digest": _history_digest(rows),
                  "run_config": run_cfg.to_dict()}
    save_checkpoint(model, final_meta, os.path.join(out_dir, "final.ckpt"))
    last = history[-1] if history else {}
    print(f"trained to step {run_cfg.trainer.steps}: "
          f"dev_err_seed={last.get('dev_err_seed'):.4f} "
          f"dev_err_max={last.get('dev_err_max'):.4f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    model, _, _, split = _load_eval_setup(args)
    writer = csv.writer(sys.stdout)
    if args.schedule:
        schedule = parse_schedule(args.schedule,
                                  model.config.to_dict()["mask"])
        violation = validate_schedule(schedule)
        if violation is not None:
            raise ValueError(f"invalid schedule: {violation}")
        err = evaluate_model(model, split, schedule)
        writer.writerow(["schedule", "depth", "err"])
        writer.writerow([schedule.text(), schedule.logical_depth, f"{err:.6f}"])
        return 0
    report = evaluate_across_schedules(model, args.depth, split)
    writer.writerow(["schedule", "depth", "err"])
    for schedule, err in zip(report.schedules, report.metrics):
        writer.writerow([schedule.text(), report.depth, f"{err:.6f}"])
    print(f"# mean={report.mean:.6f} std={report.std:.6f} "
          f"median={report.median:.6f} "
          f"median_schedule={report.median_schedule.text()}")
    return 0


# ---------------------------------------------------------------------------
# schedules
# ---------------------------------------------------------------------------

def cmd_schedules(args) -> int:
    mask = parse_mask(args.mask, args.physical) if args.mask \
        else (True,) * args.physical
    count = count_schedules(args.physical, args.depth, mask)
    if count == 0:
        raise ValueError("depth unreachable")
    for schedule in enumerate_schedules(args.physical, args.depth, mask):
        print(schedule.text())
    print(f"# count={count}")
    return 0


# ---------------------------------------------------------------------------
# sensitivity
# ---------------------------------------------------------------------------

def cmd_sensitivity(args) -> int:
    model, meta, run_cfg, split = _load_eval_setup(args)
    report = layer_sensitivity(model, split)
    rank_of = {layer: rank for rank, layer in enumerate(report.drop_priority)}
    writer = csv.writer(sys.stdout)
    writer.writerow(["layer_index", "metric_when_dropped", "drop_rank"])
    for i, metric in enumerate(report.metric_when_dropped):
        writer.writerow([i, f"{metric:.6f}", rank_of[i]])
    if args.keep is not None:
        smaller = drop_layers(model, report, args.keep)
        out = args.out or os.path.splitext(args.ckpt)[0] + f"_keep{args.keep}.ckpt"
        save_checkpoint(smaller, {"step": meta.get("step", 0),
                                  "run_config": run_cfg.to_dict()}, out)
        print(f"# wrote {out}")
    return 0


# ---------------------------------------------------------------------------
# curve
# ---------------------------------------------------------------------------

def _parse_depths(text: str, model: FoldableEncoder) -> list[int]:
    text = text.strip()
    if ".." in text:
        lo_s, hi_s = text.split("..", 1)
        lo = int(lo_s) if lo_s else model.n_physical
        hi = int(hi_s) if hi_s else model.config.max_depth
        return list(range(lo, hi + 1))
    return sorted(int(part) for part in text.split(","))


def cmd_curve(args) -> int:
    model, _, _, split = _load_eval_setup(args)
    depths = _parse_depths(args.depths, model)
    writer = csv.writer(sys.stdout)
    writer.writerow(["depth", "mean", "std", "median"])
    for depth in depths:
        report = evaluate_across_schedules(model, depth, split)
        writer.writerow([depth, f"{report.mean:.6f}", f"{report.std:.6f}",
                         f"{report.median:.6f}"])
    return 0


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run_cfg = load_run_config(args.config)
    out_dir = os.path.join(run_cfg.output_dir, "data")
    os.makedirs(out_dir, exist_ok=True)
    splits = generate_dataset(run_cfg.data)
    for name, samples in zip(("train", "dev", "test"), splits):
        path = os.path.join(out_dir, f"{name}.jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            for sample in samples:
                fh.write(json.dumps({"inputs": list(sample.inputs),
                                     "target": list(sample.target)}) + "\n")
        print(f"wrote {len(samples)} samples to {path}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="foldnet",
        description="Foldable sequence encoders: train once, run at any depth.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a foldable model from a config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint at a depth or schedule")
    p.add_argument("--ckpt", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--depth", type=int)
    group.add_argument("--schedule")
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    p.add_argument("--config", help="override the checkpoint's config echo")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("schedules", help="enumerate valid unfold schedules")
    p.add_argument("--physical", type=int, required=True)
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--mask")
    p.set_defaults(fn=cmd_schedules)

    p = sub.add_parser("sensitivity",
                       help="rank layers by bypass sensitivity; optionally drop")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--keep", type=int)
    p.add_argument("--out")
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_sensitivity)

    p = sub.add_parser("curve", help="error statistics per inference depth")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--depths", required=True,
                   help="inclusive range 'A..B' or comma list")
    p.add_argument("--split", choices=("dev", "test"), default="dev")
    p.add_argument("--config")
    p.set_defaults(fn=cmd_curve)

    p = sub.add_parser("gen-data", help="materialize the synthetic splits")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_gen_data)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"foldnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
