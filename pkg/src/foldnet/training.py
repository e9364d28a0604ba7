"""Joint training loop: per batch, the seed and the maximally unfolded
system run forward over the same physical parameters, their losses combine
with the stop-gradient KL regularizer, and one decoupled-weight-decay
adaptive update is applied under a warmup/linear-decay learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, backward, grad_of, scale
from .blocks import SOS_ID, decoder_eos_id, toy_decoder_forward
from .folding import FoldableEncoder, UnfoldSchedule, forward_with_schedule
from .losses import (
    LossBreakdown,
    OutputDistribution,
    TrainingCriterion,
    attention_ce_loss,
    ctc_loss,
    interpolated_loss,
    joint_criterion,
    kl_self_distillation,
)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
LAYERDROP_MODES = ("linear-per-layer", "uniform")


@dataclass(frozen=True)
class TrainerConfig:
    steps: int
    batch_size: int
    lr_peak: float
    warmup_steps: int
    weight_decay: float = 0.01
    layerdrop_max: float = 0.0
    layerdrop_mode: str = "linear-per-layer"
    seed: int = 0
    criterion: TrainingCriterion = field(default_factory=TrainingCriterion.ctc_defaults)
    grad_clip: float = 5.0
    log_interval: int = 100

    def __post_init__(self):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if not 0 <= self.warmup_steps < self.steps:
            raise ValueError(
                f"warmup_steps {self.warmup_steps} must lie in [0, steps)")
        if not 0.0 <= self.layerdrop_max < 1.0:
            raise ValueError(f"layerdrop_max {self.layerdrop_max} outside [0, 1)")
        if self.layerdrop_mode not in LAYERDROP_MODES:
            raise ValueError(f"unknown layerdrop_mode {self.layerdrop_mode!r}")
        if self.lr_peak <= 0 or self.weight_decay < 0:
            raise ValueError("lr_peak must be positive, weight_decay non-negative")


class OptimizerState:
    """First/second moment arrays per parameter plus the step counter."""

    def __init__(self, params: dict[str, Tensor]):
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.step = 0


def lr_at(step: int, cfg: TrainerConfig) -> float:
    """Linear ramp to the peak over the warmup, then linear decay to zero.

    The ramp evaluates step 0 at lr_peak / warmup_steps so the first update
    is never a no-op.
    """
    if step < 0 or step > cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.lr_peak * (step + 1) / cfg.warmup_steps
    return cfg.lr_peak * (cfg.steps - step) / (cfg.steps - cfg.warmup_steps)


def adamw_update(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                 opt: OptimizerState, lr: float, weight_decay: float) -> None:
    """Standard decoupled-weight-decay adaptive update, in place."""
    b1, b2 = ADAM_BETAS
    opt.step += 1
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"adamw_update: non-finite gradient for {name}")
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def layerdrop_probs(schedule: UnfoldSchedule, cfg: TrainerConfig) -> np.ndarray:
    """Per-logical-occurrence drop probabilities for the configured mode."""
    depth = schedule.logical_depth
    if cfg.layerdrop_mode == "uniform":
        return np.full(depth, cfg.layerdrop_max)
    return cfg.layerdrop_max * (np.arange(depth) + 1) / depth


def layerdrop_sample(schedule: UnfoldSchedule, cfg: TrainerConfig, rng,
                     train_mode: bool = True) -> list[bool]:
    """Keep/skip flags per logical occurrence; eval mode keeps everything."""
    depth = schedule.logical_depth
    if not train_mode or cfg.layerdrop_max == 0.0:
        return [True] * depth
    probs = layerdrop_probs(schedule, cfg)
    return list(rng.random(depth) >= probs)


# ---------------------------------------------------------------------------
# Loss assembly
# ---------------------------------------------------------------------------

def sequence_loss(model: FoldableEncoder, logits: Tensor, enc_states: Tensor,
                  sample, crit: TrainingCriterion) -> Tensor:
    """Per-sequence loss: CTC, interpolated with decoder CE when enabled."""
    ctc = ctc_loss(logits, sample.target)
    if not crit.use_decoder:
        return ctc
    prefix = [SOS_ID] + list(sample.target)
    dec_targets = list(sample.target) + [decoder_eos_id(model.config.vocab_size)]
    dec_logits = toy_decoder_forward(enc_states, prefix, model.decoder)
    ce = attention_ce_loss(dec_logits, dec_targets)
    return interpolated_loss(ce, ctc, crit.lam)


def _batch_mean(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return scale(total, 1.0 / len(terms))


def batch_losses(model: FoldableEncoder, batch, cfg: TrainerConfig, rng,
                 train_mode: bool = True):
    """Two forwards per sample (seed and deepest schedule) over shared
    parameters; returns (loss_F, loss_P, loss_reg) batch means.

    When both seed-side weights are zero (single-loss training, the
    ablation regime) the seed forward contributes nothing and is skipped;
    loss_P and loss_reg then report as None.
    """
    seed_schedule = model.seed_schedule()
    max_schedule = model.max_schedule()
    crit = cfg.criterion
    seed_side = crit.alpha_p > 0 or crit.alpha_kl > 0
    f_terms, p_terms, reg_terms = [], [], []
    for sample in batch:
        keep_f = layerdrop_sample(max_schedule, cfg, rng, train_mode)
        logits_f, h_f = forward_with_schedule(
            model, max_schedule, sample.inputs, train_mode, keep_f)
        f_terms.append(sequence_loss(model, logits_f, h_f, sample, crit))
        if not seed_side:
            continue
        keep_p = layerdrop_sample(seed_schedule, cfg, rng, train_mode)
        logits_p, h_p = forward_with_schedule(
            model, seed_schedule, sample.inputs, train_mode, keep_p)
        p_terms.append(sequence_loss(model, logits_p, h_p, sample, crit))
        reg_terms.append(kl_self_distillation(
            OutputDistribution.from_logits(logits_f),
            OutputDistribution.from_logits(logits_p)))
    loss_f = _batch_mean(f_terms)
    if not seed_side:
        return loss_f, None, None
    return loss_f, _batch_mean(p_terms), _batch_mean(reg_terms)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most ``max_norm``."""
    sq = sum(float((g * g).sum()) for g in grads.values())
    norm = math.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


def loss_and_grads(model: FoldableEncoder, batch, cfg: TrainerConfig, rng):
    """Forward both systems, combine per the criterion, backprop once.

    Returns (LossBreakdown, grads keyed by parameter name).
    """
    loss_f, loss_p, loss_reg = batch_losses(model, batch, cfg, rng, True)
    total, bd = joint_criterion(loss_f, loss_p, loss_reg, cfg.criterion)
    for name, value in (("loss_F", bd.loss_F), ("loss_P", bd.loss_P),
                        ("loss_reg", bd.loss_reg)):
        if not math.isfinite(value):
            raise FloatingPointError(f"non-finite loss term {name}: {value}")
    grad_map = backward(total)
    params = model.parameters()
    grads = {name: grad_of(grad_map, t) for name, t in params.items()}
    return bd, grads


def train_step(model: FoldableEncoder, batch, cfg: TrainerConfig,
               opt: OptimizerState, rng) -> LossBreakdown:
    """One joint step: two forwards, one clipped parameter update."""
    bd, grads = loss_and_grads(model, batch, cfg, rng)
    clip_gradients(grads, cfg.grad_clip)
    lr = lr_at(min(opt.step, cfg.steps), cfg)
    adamw_update(model.parameters(), grads, opt, lr, cfg.weight_decay)
    return bd


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

METRICS_HEADER = ("step", "lr", "loss_F", "loss_P", "loss_reg", "total",
                  "dev_err_seed", "dev_err_max")


def train(model: FoldableEncoder, train_set, dev_set, cfg: TrainerConfig,
          opt: OptimizerState | None = None, start_step: int = 0,
          on_log=None) -> list[dict]:
    """Run the loop from ``start_step`` to ``cfg.steps``.

    Every ``log_interval`` steps (and at the end) a metrics row is recorded
    with dev token-error at the seed depth and at the maximum depth;
    ``on_log(row, model)`` fires after each recorded row. Returns the rows.
    """
    from .evaluation import evaluate_model  # local import to avoid a cycle

    if opt is None:
        opt = OptimizerState(model.parameters())
        opt.step = start_step
    rng = np.random.default_rng(cfg.seed + start_step)
    history: list[dict] = []
    last = LossBreakdown(math.nan, math.nan, math.nan, math.nan)
    for step in range(start_step, cfg.steps):
        idx = rng.integers(0, len(train_set), size=cfg.batch_size)
        batch = [train_set[i] for i in idx]
        last = train_step(model, batch, cfg, opt, rng)
        done = step + 1
        if done % cfg.log_interval == 0 or done == cfg.steps:
            row = {
                "step": done,
                "lr": lr_at(min(opt.step, cfg.steps), cfg),
                "loss_F": last.loss_F,
                "loss_P": last.loss_P,
                "loss_reg": last.loss_reg,
                "total": last.total,
                "dev_err_seed": evaluate_model(model, dev_set,
                                               model.seed_schedule()),
                "dev_err_max": evaluate_model(model, dev_set,
                                              model.max_schedule()),
            }
            history.append(row)
            if on_log is not None:
                on_log(row, model)
    return history
