"""Evaluation and compression analysis: greedy CTC decoding, token error
rate, per-layer sensitivity ranking with priority dropping, multi-schedule
robustness statistics, and parameter accounting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .folding import (
    FoldableEncoder,
    ModelConfig,
    UnfoldSchedule,
    count_schedules,
    enumerate_schedules,
    forward_with_schedule,
    model_from_arrays,
)
from .losses import BLANK_ID

SCHEDULE_EXPLOSION_LIMIT = 10_000


def collapse_ctc_frames(labels) -> list[int]:
    """Merge adjacent repeats, then drop blanks; idempotent."""
    out = []
    prev = None
    for v in labels:
        v = int(v)
        if v != prev and v != BLANK_ID:
            out.append(v)
        prev = v
    return out


def greedy_ctc_decode(log_probs) -> list[int]:
    """Best-path decoding: frame argmax followed by the collapse rule."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return collapse_ctc_frames(data.argmax(axis=-1))


def levenshtein(ref, hyp) -> int:
    """Edit distance with uniform unit costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def error_rate(ref, hyp) -> float:
    """Edit distance divided by reference length (not symmetric)."""
    ref = list(ref)
    if not ref:
        raise ValueError("error_rate: empty reference")
    return levenshtein(ref, hyp) / len(ref)


def evaluate_model(model: FoldableEncoder, samples,
                   schedule: UnfoldSchedule, bypass=None) -> float:
    """Corpus token-error rate under one schedule: summed edit distance over
    summed reference length. ``bypass`` names physical layers to skip."""
    keep = None
    if bypass:
        keep = []
        for i, reps in enumerate(schedule.repeats):
            keep.extend([i not in bypass] * reps)
    distance = 0
    length = 0
    for sample in samples:
        logits, _ = forward_with_schedule(model, schedule, sample.inputs,
                                          train_mode=False, keep_mask=keep)
        hyp = greedy_ctc_decode(logits.data)
        distance += levenshtein(sample.target, hyp)
        length += len(sample.target)
    if length == 0:
        raise ValueError("evaluate_model: evaluation set has no target tokens")
    return distance / length


# ---------------------------------------------------------------------------
# Layer sensitivity and dropping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SensitivityReport:
    """Per-layer metric with that layer bypassed, and the drop order.

    ``drop_priority`` sorts layers by ascending metric (ties to the lower
    index): the least sensitive layer comes first and is dropped first.
    """

    metric_when_dropped: tuple[float, ...]
    drop_priority: tuple[int, ...]


def layer_sensitivity(model: FoldableEncoder, samples) -> SensitivityReport:
    """Evaluate the seed with each physical layer bypassed in turn."""
    if model.n_physical < 2:
        raise ValueError("layer_sensitivity: model needs at least 2 layers")
    schedule = model.seed_schedule()
    metrics = tuple(
        evaluate_model(model, samples, schedule, bypass={i})
        for i in range(model.n_physical))
    priority = tuple(np.argsort(np.asarray(metrics), kind="stable").tolist())
    return SensitivityReport(metric_when_dropped=metrics,
                             drop_priority=priority)


def drop_layers(model: FoldableEncoder, report: SensitivityReport,
                keep: int) -> FoldableEncoder:
    """Remove the most-droppable layers, leaving ``keep`` survivors in their
    original order; the result is a fresh seed ready for unfolding."""
    n_p = model.n_physical
    if not 1 <= keep <= n_p:
        raise ValueError(f"drop_layers: keep {keep} outside 1..{n_p}")
    dropped = set(report.drop_priority[:n_p - keep])
    survivors = [i for i in range(n_p) if i not in dropped]
    cfg = model.config
    new_cfg = ModelConfig(
        d_model=cfg.d_model, n_heads=cfg.n_heads, d_ffn=cfg.d_ffn,
        conv_kernel=cfg.conv_kernel, block_kind=cfg.block_kind,
        n_physical=keep, max_depth=max(cfg.max_depth, keep),
        foldable_mask=tuple(cfg.foldable_mask[i] for i in survivors),
        vocab_size=cfg.vocab_size, use_decoder=cfg.use_decoder)
    arrays: dict[str, np.ndarray] = {}
    for new_i, old_i in enumerate(survivors):
        for name, t in model.blocks[old_i].tensors.items():
            arrays[f"block{new_i}.{name}"] = t.data.copy()
    for name, t in model.frontend.items():
        arrays[f"embed.{name}"] = t.data.copy()
    for name, t in model.head.items():
        arrays[f"head.{name}"] = t.data.copy()
    if model.decoder is not None:
        for name, t in model.decoder.tensors.items():
            arrays[f"dec.{name}"] = t.data.copy()
    return model_from_arrays(new_cfg, arrays)


# ---------------------------------------------------------------------------
# Robustness across schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RobustnessReport:
    """Metric per enumerated schedule at one depth, plus summary statistics."""

    depth: int
    schedules: tuple[UnfoldSchedule, ...]
    metrics: tuple[float, ...]
    mean: float
    std: float
    median: float
    median_schedule: UnfoldSchedule


def evaluate_across_schedules(model: FoldableEncoder, depth: int,
                              samples) -> RobustnessReport:
    """Evaluate every unfolding path realizing ``depth``.

    The reported median schedule is the enumerated schedule whose metric is
    closest to the median (first in enumeration order on ties).
    """
    mask = model.config.foldable_mask
    n = count_schedules(model.n_physical, depth, mask)
    if n == 0:
        raise ValueError(f"depth unreachable: {depth}")
    if n > SCHEDULE_EXPLOSION_LIMIT:
        raise ValueError(
            f"refusing to evaluate {n} schedules (limit {SCHEDULE_EXPLOSION_LIMIT})")
    schedules = enumerate_schedules(model.n_physical, depth, mask)
    metrics = tuple(evaluate_model(model, samples, s) for s in schedules)
    arr = np.asarray(metrics)
    median = float(np.median(arr))
    nearest = int(np.argmin(np.abs(arr - median)))
    return RobustnessReport(
        depth=depth, schedules=tuple(schedules), metrics=metrics,
        mean=float(arr.mean()), std=float(arr.std()), median=median,
        median_schedule=schedules[nearest])


def parameter_report(model: FoldableEncoder, depths) -> list[dict]:
    """One row per inference depth; the parameter count column is constant
    because every depth shares the same physical arrays."""
    rows = []
    for depth in depths:
        if count_schedules(model.n_physical, depth,
                           model.config.foldable_mask) == 0:
            raise ValueError(f"depth unreachable: {depth}")
        rows.append({
            "depth": int(depth),
            "physical_layers": model.n_physical,
            "parameters": model.param_count(),
        })
    return rows
