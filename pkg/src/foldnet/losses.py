"""Training losses: CTC with a log-space dynamic program plus an exhaustive
brute-force oracle, label-smoothed attention cross-entropy, multitask
interpolation, and the stop-gradient KL self-distillation regularizer."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    LOG_ZERO,
    Tensor,
    add,
    constant,
    exp,
    log_softmax,
    mul,
    reduce_mean,
    reduce_sum,
    scale,
    stop_gradient,
    sub,
)

BLANK_ID = 0

# Default loss weights: (alpha_p, alpha_kl) per training style.
AED_ALPHAS = (0.25, 0.1)
CTC_ALPHAS = (0.7, 0.005)


@dataclass(frozen=True)
class TrainingCriterion:
    """Scalars of the joint criterion: interpolation weight and loss weights."""

    lam: float = 0.3
    alpha_p: float = 0.25
    alpha_kl: float = 0.1
    use_decoder: bool = False

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lam {self.lam} outside [0, 1]")
        if self.alpha_p < 0 or self.alpha_kl < 0:
            raise ValueError("alpha weights must be non-negative")

    @classmethod
    def aed_defaults(cls) -> "TrainingCriterion":
        return cls(lam=0.3, alpha_p=AED_ALPHAS[0], alpha_kl=AED_ALPHAS[1],
                   use_decoder=True)

    @classmethod
    def ctc_defaults(cls) -> "TrainingCriterion":
        return cls(lam=0.3, alpha_p=CTC_ALPHAS[0], alpha_kl=CTC_ALPHAS[1],
                   use_decoder=False)


@dataclass(frozen=True)
class LossBreakdown:
    """Per-batch loss terms and their weighted total."""

    loss_F: float
    loss_P: float
    loss_reg: float
    total: float

    def finite(self) -> bool:
        return all(math.isfinite(v) for v in
                   (self.loss_F, self.loss_P, self.loss_reg, self.total))


@dataclass
class OutputDistribution:
    """Frame-wise log-probabilities over the blank-augmented vocabulary."""

    log_probs: Tensor
    frames: int

    @classmethod
    def from_logits(cls, logits: Tensor) -> "OutputDistribution":
        return cls(log_probs=log_softmax(logits), frames=logits.shape[0])

    def row_sums(self) -> np.ndarray:
        return np.exp(self.log_probs.data).sum(axis=-1)


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def _validate_ctc_target(n_classes: int, target) -> list[int]:
    target = [int(v) for v in target]
    for v in target:
        if not 1 <= v < n_classes:
            raise ValueError(
                f"ctc target label {v} outside 1..{n_classes - 1} "
                f"(blank {BLANK_ID} is reserved)")
    return target


def _min_frames(target: list[int]) -> int:
    dups = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + dups


def _ctc_lattice(target: list[int]):
    """Blank-interleaved labels and the mask of forbidden skip entries."""
    lab_ext = [BLANK_ID]
    for v in target:
        lab_ext.extend((v, BLANK_ID))
    s = len(lab_ext)
    # The skip transition s-2 -> s is illegal into blanks and between
    # repeated labels.
    no_skip = np.zeros(s, dtype=bool)
    for i in range(s):
        if i < 2 or i % 2 == 0 or lab_ext[i] == lab_ext[i - 2]:
            no_skip[i] = True
    return np.asarray(lab_ext), no_skip


def _ctc_alphas(lp: np.ndarray, lab_ext, no_skip):
    """Log-space forward lattice; returns (alphas, log-likelihood)."""
    t_frames = lp.shape[0]
    s = len(lab_ext)
    em = lp[:, lab_ext]
    alpha = np.full((t_frames, s), LOG_ZERO)
    alpha[0, 0] = em[0, 0]
    if s > 1:
        alpha[0, 1] = em[0, 1]
    for t in range(1, t_frames):
        prev = alpha[t - 1]
        a = np.logaddexp(prev, np.concatenate(([LOG_ZERO], prev[:-1])))
        if s >= 2:
            skip = np.concatenate(([LOG_ZERO, LOG_ZERO], prev[:-2]))
            a = np.logaddexp(a, np.where(no_skip, LOG_ZERO, skip))
        alpha[t] = a + em[t]
    ll = alpha[-1, -1] if s == 1 else np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    return alpha, ll


def _ctc_ll_grad(lp: np.ndarray, lab_ext, no_skip, alpha, ll) -> np.ndarray:
    """d(log-likelihood)/d(log-probs) via the backward recursion.

    ``beta[s]`` holds the suffix mass from state s after frame t, excluding
    the emission at t, so alpha + beta - ll is the state posterior at t.
    """
    t_frames, _ = lp.shape
    s = len(lab_ext)
    em = lp[:, lab_ext]
    allow = np.zeros(s, dtype=bool)
    if s >= 2:
        allow[:s - 2] = ~no_skip[2:]
    beta = np.full(s, LOG_ZERO)
    beta[s - 1] = 0.0
    if s >= 2:
        beta[s - 2] = 0.0
    dll = np.zeros_like(lp)
    for t in range(t_frames - 1, -1, -1):
        posterior = np.exp(alpha[t] + beta - ll)
        np.add.at(dll[t], lab_ext, posterior)
        if t > 0:
            nxt = em[t] + beta
            b = np.logaddexp(nxt, np.concatenate((nxt[1:], [LOG_ZERO])))
            if s >= 2:
                skip = np.concatenate((nxt[2:], [LOG_ZERO, LOG_ZERO]))
                b = np.logaddexp(b, np.where(allow, skip, LOG_ZERO))
            beta = b
    return dll


def ctc_loss(logits: Tensor, target) -> Tensor:
    """Negative log-likelihood of the target under the alignment lattice.

    The forward dynamic program runs in log space over the blank-interleaved
    label sequence; the gradient comes from the matching backward recursion,
    so the loss differentiates through the tape like any other kernel.
    """
    t_frames, n_classes = logits.shape
    target = _validate_ctc_target(n_classes, target)
    if t_frames < _min_frames(target):
        raise ValueError(
            f"target too long: {len(target)} labels "
            f"(minimum {_min_frames(target)} frames) for {t_frames} frames")

    lab_ext, no_skip = _ctc_lattice(target)
    lp = log_softmax(logits)
    alpha, ll = _ctc_alphas(lp.data, lab_ext, no_skip)

    def vjp(g):
        dll = _ctc_ll_grad(lp.data, lab_ext, no_skip, alpha, ll)
        return (-g * dll,)

    return Tensor(-ll, op="ctc", inputs=(lp,), vjp=vjp)


def ctc_brute_force(logits, target) -> float:
    """Exhaustive CTC oracle: sums the probability of every frame path that
    collapses (merge repeats, then drop blanks) to the target."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    t_frames, n_classes = data.shape
    if t_frames > 8:
        raise ValueError(f"ctc_brute_force: {t_frames} frames too many (max 8)")
    target = _validate_ctc_target(n_classes, target)

    shifted = data - data.max(axis=-1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=-1, keepdims=True)

    total = 0.0
    for path in itertools.product(range(n_classes), repeat=t_frames):
        collapsed = [k for k, _ in itertools.groupby(path) if k != BLANK_ID]
        if collapsed == target:
            p = 1.0
            for t, k in enumerate(path):
                p *= probs[t, k]
            total += p
    if total <= 0.0:
        raise ValueError("ctc_brute_force: target has zero probability "
                         "(no path collapses to it)")
    return -math.log(total)


# ---------------------------------------------------------------------------
# Attention branch and interpolation
# ---------------------------------------------------------------------------

def attention_ce_loss(dec_logits: Tensor, targets,
                      smoothing: float = 0.1) -> Tensor:
    """Mean label-smoothed cross-entropy over teacher-forced positions."""
    targets = [int(v) for v in targets]
    n_pos, n_cls = dec_logits.shape
    if len(targets) != n_pos:
        raise ValueError(
            f"attention_ce_loss: {len(targets)} targets for {n_pos} positions")
    for v in targets:
        if not 0 <= v < n_cls:
            raise ValueError(f"attention_ce_loss: target {v} outside 0..{n_cls - 1}")
    q = np.full((n_pos, n_cls), smoothing / n_cls)
    q[np.arange(n_pos), targets] += 1.0 - smoothing
    lp = log_softmax(dec_logits)
    return scale(reduce_mean(reduce_sum(mul(constant(q), lp), axis=1)), -1.0)


def interpolated_loss(ce, ctc, lam: float):
    """Multitask mix: (1 - lam) * attention CE + lam * CTC."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lam {lam} outside [0, 1]")
    if isinstance(ce, Tensor) or isinstance(ctc, Tensor):
        return add(scale(ce, 1.0 - lam), scale(ctc, lam))
    return (1.0 - lam) * ce + lam * ctc


# ---------------------------------------------------------------------------
# Self-distillation
# ---------------------------------------------------------------------------

def kl_self_distillation(teacher: OutputDistribution,
                         student: OutputDistribution) -> Tensor:
    """Frame-averaged KL(teacher || student) with the teacher behind a
    stop-gradient barrier, so only the student branch receives gradient."""
    if teacher.log_probs.shape != student.log_probs.shape:
        raise ValueError(
            f"kl_self_distillation: teacher {tuple(teacher.log_probs.shape)} "
            f"vs student {tuple(student.log_probs.shape)}")
    t_lp = stop_gradient(teacher.log_probs)
    p = exp(t_lp)
    frame_kl = reduce_sum(mul(p, sub(t_lp, student.log_probs)), axis=1)
    return reduce_mean(frame_kl)


def joint_criterion(loss_f, loss_p, loss_reg,
                    crit: TrainingCriterion):
    """Combine the unfolded, seed, and regularizer terms.

    Returns (total, LossBreakdown); total is a Tensor when any input is.
    """
    if crit.alpha_p < 0 or crit.alpha_kl < 0:
        raise ValueError("alpha weights must be non-negative")
    if crit.alpha_p > 0 and loss_p is None:
        raise ValueError("alpha_p > 0 requires a seed loss term")
    if crit.alpha_kl > 0 and loss_reg is None:
        raise ValueError("alpha_kl > 0 requires a regularizer term")
    tensors = any(isinstance(v, Tensor) for v in (loss_f, loss_p, loss_reg))
    if tensors:
        total = loss_f
        if crit.alpha_p > 0:
            total = add(total, scale(loss_p, crit.alpha_p))
        if crit.alpha_kl > 0:
            total = add(total, scale(loss_reg, crit.alpha_kl))
    else:
        total = (loss_f + crit.alpha_p * (loss_p or 0.0)
                 + crit.alpha_kl * (loss_reg or 0.0))

    def as_float(v):
        if v is None:
            return 0.0
        return v.item() if isinstance(v, Tensor) else float(v)

    breakdown = LossBreakdown(
        loss_F=as_float(loss_f), loss_P=as_float(loss_p),
        loss_reg=as_float(loss_reg), total=as_float(total))
    return total, breakdown
