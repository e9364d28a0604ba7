"""Depth unfolding: repeat schedules over a fixed set of physical layers.

A schedule assigns each physical layer a repeat count; layers marked
foldable may repeat, and over those layers the counts may spread by at most
one (the balance rule). Executing a schedule reuses the physical parameter
store, so every logical depth shares one set of arrays.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from math import comb

import numpy as np

from .autodiff import Tensor
from .blocks import (
    BlockConfig,
    BlockParams,
    block_forward,
    block_param_count,
    decoder_param_count,
    embed_inputs,
    init_block_params,
    init_decoder_params,
    init_head,
    init_token_frontend,
    project_logits,
)


@dataclass(frozen=True)
class UnfoldSchedule:
    """Per-physical-layer repeat counts realizing one logical depth."""

    repeats: tuple[int, ...]
    foldable_mask: tuple[bool, ...]

    @property
    def logical_depth(self) -> int:
        return sum(self.repeats)

    def text(self) -> str:
        return ",".join(str(r) for r in self.repeats)

    def mask_text(self) -> str:
        return "".join("u" if m else "f" for m in self.foldable_mask)


def parse_schedule(repeats_text: str, mask_text: str | None = None) -> UnfoldSchedule:
    """Parse the CLI text forms: repeats "1,1,2,2" and mask "ffuu"."""
    try:
        repeats = tuple(int(part) for part in repeats_text.split(","))
    except ValueError:
        raise ValueError(
            f"schedule text {repeats_text!r} is not comma-separated integers"
        ) from None
    mask = parse_mask(mask_text, len(repeats)) if mask_text else (True,) * len(repeats)
    return UnfoldSchedule(repeats=repeats, foldable_mask=mask)


def parse_mask(mask_text: str, n_layers: int | None = None) -> tuple[bool, ...]:
    if set(mask_text) - {"f", "u"}:
        raise ValueError(f"mask text {mask_text!r} must use only 'f' and 'u'")
    mask = tuple(ch == "u" for ch in mask_text)
    if n_layers is not None and len(mask) != n_layers:
        raise ValueError(
            f"mask text {mask_text!r} has {len(mask)} entries, expected {n_layers}")
    return mask


def validate_schedule(s: UnfoldSchedule) -> str | None:
    """Return None when valid, else the first violated clause by name."""
    if len(s.repeats) != len(s.foldable_mask):
        return "length mismatch: repeats vs foldable_mask"
    if any(r < 1 for r in s.repeats):
        return "nonpositive repeat"
    folded = [r for r, m in zip(s.repeats, s.foldable_mask) if m]
    if any(r != 1 for r, m in zip(s.repeats, s.foldable_mask) if not m):
        return "unfoldable layer repeated"
    if folded and max(folded) - min(folded) > 1:
        return "balance rule"
    return None


def _distribution(n_p: int, depth: int, mask) -> tuple[int, int, list[int]]:
    """Split the extra executions: returns (base, remainder, masked indices)."""
    mask = tuple(mask)
    if len(mask) != n_p:
        raise ValueError(f"mask length {len(mask)} != n_p {n_p}")
    extra = depth - n_p
    masked = [i for i, m in enumerate(mask) if m]
    if depth < n_p or (extra > 0 and not masked):
        raise ValueError(f"depth unreachable: {depth} from {n_p} physical layers")
    if extra == 0:
        return 0, 0, masked
    base, rem = divmod(extra, len(masked))
    return base, rem, masked


def count_schedules(n_p: int, depth: int, mask) -> int:
    """Number of valid schedules realizing ``depth``; 0 when unreachable."""
    try:
        base, rem, masked = _distribution(n_p, depth, mask)
    except ValueError:
        return 0
    return comb(len(masked), rem) if rem else 1


def enumerate_schedules(n_p: int, depth: int, mask) -> list[UnfoldSchedule]:
    """All valid schedules summing to ``depth``, lexicographic by repeats."""
    base, rem, masked = _distribution(n_p, depth, mask)
    mask = tuple(mask)
    out = []
    for chosen in itertools.combinations(masked, rem):
        chosen = set(chosen)
        repeats = tuple(
            1 + ((base + (1 if i in chosen else 0)) if m else 0)
            for i, m in enumerate(mask))
        out.append(UnfoldSchedule(repeats=repeats, foldable_mask=mask))
    out.sort(key=lambda s: s.repeats)
    return out


def supported_depths(n_p: int, n_f_max: int, mask) -> list[int]:
    """All logical depths in [n_p, n_f_max] reachable under the mask."""
    if n_p > n_f_max:
        raise ValueError(f"n_p {n_p} exceeds maximum depth {n_f_max}")
    return [d for d in range(n_p, n_f_max + 1)
            if count_schedules(n_p, d, mask) > 0]


def default_schedule(n_p: int, depth: int, mask) -> UnfoldSchedule:
    """Canonical schedule: leftover extra repeats go to the last foldable layers."""
    base, rem, masked = _distribution(n_p, depth, mask)
    mask = tuple(mask)
    chosen = set(masked[len(masked) - rem:]) if rem else set()
    repeats = tuple(
        1 + ((base + (1 if i in chosen else 0)) if m else 0)
        for i, m in enumerate(mask))
    return UnfoldSchedule(repeats=repeats, foldable_mask=mask)


# ---------------------------------------------------------------------------
# Foldable model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    d_model: int
    n_heads: int
    d_ffn: int
    conv_kernel: int
    block_kind: str
    n_physical: int
    max_depth: int
    foldable_mask: tuple[bool, ...]
    vocab_size: int
    use_decoder: bool = False

    def __post_init__(self):
        object.__setattr__(self, "foldable_mask", tuple(self.foldable_mask))
        self.block_config()  # validates block fields
        if self.n_physical < 1:
            raise ValueError("ModelConfig: n_physical must be positive")
        if self.n_physical > self.max_depth:
            raise ValueError(
                f"ModelConfig: n_physical {self.n_physical} exceeds "
                f"max_depth {self.max_depth}")
        if len(self.foldable_mask) != self.n_physical:
            raise ValueError("ModelConfig: mask length must equal n_physical")
        if self.vocab_size < 2:
            raise ValueError("ModelConfig: vocab_size must be at least 2")
        if count_schedules(self.n_physical, self.max_depth,
                           self.foldable_mask) == 0:
            raise ValueError(
                f"ModelConfig: max_depth {self.max_depth} unreachable under mask")

    def block_config(self) -> BlockConfig:
        return BlockConfig(d_model=self.d_model, n_heads=self.n_heads,
                           d_ffn=self.d_ffn, conv_kernel=self.conv_kernel,
                           block_kind=self.block_kind)

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model, "n_heads": self.n_heads,
            "d_ffn": self.d_ffn, "conv_kernel": self.conv_kernel,
            "block_kind": self.block_kind, "n_physical": self.n_physical,
            "max_depth": self.max_depth,
            "mask": "".join("u" if m else "f" for m in self.foldable_mask),
            "vocab_size": self.vocab_size, "use_decoder": self.use_decoder,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            d_model=int(d["d_model"]), n_heads=int(d["n_heads"]),
            d_ffn=int(d["d_ffn"]), conv_kernel=int(d["conv_kernel"]),
            block_kind=str(d["block_kind"]), n_physical=int(d["n_physical"]),
            max_depth=int(d["max_depth"]),
            foldable_mask=parse_mask(str(d["mask"]), int(d["n_physical"])),
            vocab_size=int(d["vocab_size"]),
            use_decoder=bool(d.get("use_decoder", False)),
        )


@dataclass
class FoldableEncoder:
    """The physical parameter store shared by every logical depth."""

    config: ModelConfig
    blocks: list[BlockParams]
    frontend: dict[str, Tensor]
    head: dict[str, Tensor]
    decoder: BlockParams | None = None

    @classmethod
    def build(cls, config: ModelConfig, rng) -> "FoldableEncoder":
        bc = config.block_config()
        blocks = [init_block_params(bc, rng) for _ in range(config.n_physical)]
        frontend = init_token_frontend(config.vocab_size, config.d_model, rng)
        head = init_head(config.d_model, config.vocab_size, rng)
        decoder = (init_decoder_params(bc, config.vocab_size, rng)
                   if config.use_decoder else None)
        return cls(config=config, blocks=blocks, frontend=frontend,
                   head=head, decoder=decoder)

    @property
    def n_physical(self) -> int:
        return len(self.blocks)

    def parameters(self) -> dict[str, Tensor]:
        """Flat name -> tensor map over exactly the physical parameters."""
        out: dict[str, Tensor] = {}
        for i, block in enumerate(self.blocks):
            for name, t in block.tensors.items():
                out[f"block{i}.{name}"] = t
        for name, t in self.frontend.items():
            out[f"embed.{name}"] = t
        for name, t in self.head.items():
            out[f"head.{name}"] = t
        if self.decoder is not None:
            for name, t in self.decoder.tensors.items():
                out[f"dec.{name}"] = t
        return out

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    def expected_param_count(self) -> int:
        """Closed-form count; must equal ``param_count`` exactly."""
        c = self.config
        n = c.n_physical * block_param_count(c.block_config())
        n += (c.vocab_size + 1) * c.d_model                      # embedding
        n += c.d_model * (c.vocab_size + 1) + (c.vocab_size + 1)  # head
        if c.use_decoder:
            n += decoder_param_count(c.block_config(), c.vocab_size)
        return n

    def seed_schedule(self) -> UnfoldSchedule:
        return UnfoldSchedule(repeats=(1,) * self.n_physical,
                              foldable_mask=self.config.foldable_mask)

    def max_schedule(self) -> UnfoldSchedule:
        return default_schedule(self.n_physical, self.config.max_depth,
                                self.config.foldable_mask)

    def copy(self) -> "FoldableEncoder":
        """Deep copy with fresh parameter tensors."""
        return model_from_arrays(self.config, {
            name: t.data.copy() for name, t in self.parameters().items()})


def model_from_arrays(config: ModelConfig,
                      arrays: dict[str, np.ndarray]) -> FoldableEncoder:
    """Construct a model whose parameters take the given values."""
    model = FoldableEncoder.build(config, np.random.default_rng(0))
    params = model.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise ValueError(f"parameter names mismatch: {missing[:4]}")
    for name, t in params.items():
        arr = np.asarray(arrays[name], dtype=np.float64)
        if arr.shape != t.data.shape:
            raise ValueError(
                f"parameter {name}: shape {arr.shape} != {t.data.shape}")
        t.data = arr.copy()
    return model


def forward_with_schedule(model: FoldableEncoder, schedule: UnfoldSchedule,
                          tokens, train_mode: bool = False,
                          keep_mask=None) -> tuple[Tensor, Tensor]:
    """Run the frontend, the scheduled layer repeats, and the head.

    Layer i executes its repeats consecutively before layer i+1 starts.
    ``keep_mask`` (one flag per logical occurrence) bypasses occurrences
    marked False, passing their input through unchanged.

    Returns (frame logits, encoder states).
    """
    violation = validate_schedule(schedule)
    if violation is not None:
        raise ValueError(f"invalid schedule: {violation}")
    if len(schedule.repeats) != model.n_physical:
        raise ValueError(
            f"invalid schedule: {len(schedule.repeats)} entries for "
            f"{model.n_physical} physical layers")
    if keep_mask is not None and len(keep_mask) != schedule.logical_depth:
        raise ValueError("keep_mask length must equal logical depth")
    h = embed_inputs(tokens, model.frontend)
    occurrence = 0
    for i, reps in enumerate(schedule.repeats):
        for _ in range(reps):
            if keep_mask is None or keep_mask[occurrence]:
                h = block_forward(model.blocks[i], h, train_mode)
            occurrence += 1
    return project_logits(h, model.head), h


def untie(model: FoldableEncoder, schedule: UnfoldSchedule) -> FoldableEncoder:
    """Materialize a schedule as an untied model with duplicated layers.

    Each physical layer is cloned ``repeats`` times into independent
    parameters, so the result executes the same function at depth
    ``schedule.logical_depth`` without weight sharing.
    """
    violation = validate_schedule(schedule)
    if violation is not None:
        raise ValueError(f"invalid schedule: {violation}")
    depth = schedule.logical_depth
    cfg = model.config
    new_cfg = ModelConfig(
        d_model=cfg.d_model, n_heads=cfg.n_heads, d_ffn=cfg.d_ffn,
        conv_kernel=cfg.conv_kernel, block_kind=cfg.block_kind,
        n_physical=depth, max_depth=depth, foldable_mask=(True,) * depth,
        vocab_size=cfg.vocab_size, use_decoder=cfg.use_decoder)
    new = FoldableEncoder.build(new_cfg, np.random.default_rng(0))
    j = 0
    for i, reps in enumerate(schedule.repeats):
        for _ in range(reps):
            for name, t in model.blocks[i].tensors.items():
                new.blocks[j].tensors[name].data = t.data.copy()
            j += 1
    for name, t in model.frontend.items():
        new.frontend[name].data = t.data.copy()
    for name, t in model.head.items():
        new.head[name].data = t.data.copy()
    if model.decoder is not None:
        for name, t in model.decoder.tensors.items():
            new.decoder.tensors[name].data = t.data.copy()
    return new
