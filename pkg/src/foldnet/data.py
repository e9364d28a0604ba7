"""Synthetic desk-scale sequence task: inputs are token streams mixing
content tokens with a noise token; the target is the in-order content
subsequence. Splits come from distinct seed streams and are deterministic."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE_ID = 0
_MAX_RESAMPLES = 1000


@dataclass(frozen=True)
class SyntheticSample:
    """One sequence pair; the target is derivable from the inputs by
    deleting noise tokens and is never empty."""

    inputs: tuple[int, ...]
    target: tuple[int, ...]


@dataclass(frozen=True)
class DataConfig:
    seed: int
    sizes: tuple[int, int, int]
    t_range: tuple[int, int]
    vocab_size: int
    noise_rate: float

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if not 0.0 <= self.noise_rate <= 0.9:
            raise ValueError(f"noise_rate {self.noise_rate} outside [0, 0.9]")
        lo, hi = self.t_range
        if lo < 1 or lo > hi:
            raise ValueError(f"infeasible t_range {self.t_range}")
        if any(n < 1 for n in self.sizes):
            raise ValueError("every split must have at least one sample")


def _feasible(inputs: list[int]) -> bool:
    target = [v for v in inputs if v != NOISE_ID]
    if not target:
        return False
    dups = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(inputs) >= len(target) + dups


def _draw_sample(rng, t_range, vocab_size, noise_rate) -> SyntheticSample:
    lo, hi = t_range
    for _ in range(_MAX_RESAMPLES):
        t = int(rng.integers(lo, hi + 1))
        noise = rng.random(t) < noise_rate
        content = rng.integers(1, vocab_size + 1, size=t)
        inputs = np.where(noise, NOISE_ID, content).tolist()
        if _feasible(inputs):
            return SyntheticSample(
                inputs=tuple(inputs),
                target=tuple(v for v in inputs if v != NOISE_ID))
    raise ValueError(
        f"infeasible task: no alignable draw in {_MAX_RESAMPLES} tries "
        f"(t_range {t_range}, noise_rate {noise_rate})")


def generate_split(seed: int, stream: int, count: int, t_range,
                   vocab_size: int, noise_rate: float) -> list[SyntheticSample]:
    rng = np.random.default_rng([seed, stream])
    return [_draw_sample(rng, t_range, vocab_size, noise_rate)
            for _ in range(count)]


def generate_dataset(cfg: DataConfig):
    """Deterministic (train, dev, test) lists for one data configuration."""
    return tuple(
        generate_split(cfg.seed, stream, count, cfg.t_range,
                       cfg.vocab_size, cfg.noise_rate)
        for stream, count in enumerate(cfg.sizes))
