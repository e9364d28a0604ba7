"""Scikit-learn style wrapper: a foldable CTC sequence recognizer with
``fit``/``predict``/``score`` and ``get_params`` so the model composes with
the wider estimator ecosystem."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .data import SyntheticSample
from .evaluation import evaluate_model, greedy_ctc_decode
from .folding import (
    FoldableEncoder,
    ModelConfig,
    UnfoldSchedule,
    forward_with_schedule,
    default_schedule,
    supported_depths,
)
from .losses import TrainingCriterion
from .training import TrainerConfig, train


def validate_sequences(x, name: str, low: int, high: int) -> list[tuple[int, ...]]:
    """Check a ragged batch of integer sequences in ``[low, high]``."""
    if isinstance(x, (str, bytes)) or not hasattr(x, "__iter__"):
        raise ValueError(f"{name} must be an iterable of integer sequences")
    out = []
    for i, seq in enumerate(x):
        seq = [int(v) for v in seq]
        if not seq:
            raise ValueError(f"{name}[{i}] is empty")
        for v in seq:
            if not low <= v <= high:
                raise ValueError(
                    f"{name}[{i}] contains token {v} outside {low}..{high}")
        out.append(tuple(seq))
    return out


class FoldableCTCRecognizer(BaseEstimator):
    """Sequence recognizer trained jointly at its seed and unfolded depths.

    ``fit`` consumes parallel lists of input token sequences (0 = noise,
    1..vocab_size = content) and target label sequences; ``predict`` greedily
    decodes at any supported logical depth from the shared physical layers.
    """

    def __init__(self, vocab_size=8, d_model=32, n_heads=4, d_ffn=64,
                 conv_kernel=3, block_kind="conformer", n_physical=3,
                 max_depth=6, foldable_mask=None, use_decoder=False,
                 lam=0.3, alpha_p=0.7, alpha_kl=0.005, steps=400,
                 batch_size=8, lr_peak=2e-3, warmup_frac=0.05,
                 weight_decay=0.01, layerdrop_max=0.0,
                 layerdrop_mode="linear-per-layer", random_state=0):
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.d_ffn = d_ffn
        self.conv_kernel = conv_kernel
        self.block_kind = block_kind
        self.n_physical = n_physical
        self.max_depth = max_depth
        self.foldable_mask = foldable_mask
        self.use_decoder = use_decoder
        self.lam = lam
        self.alpha_p = alpha_p
        self.alpha_kl = alpha_kl
        self.steps = steps
        self.batch_size = batch_size
        self.lr_peak = lr_peak
        self.warmup_frac = warmup_frac
        self.weight_decay = weight_decay
        self.layerdrop_max = layerdrop_max
        self.layerdrop_mode = layerdrop_mode
        self.random_state = random_state

    # -- configuration assembly -------------------------------------------

    def _mask(self) -> tuple[bool, ...]:
        if self.foldable_mask is None:
            return (True,) * self.n_physical
        if isinstance(self.foldable_mask, str):
            from .folding import parse_mask
            return parse_mask(self.foldable_mask, self.n_physical)
        return tuple(bool(m) for m in self.foldable_mask)

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads, d_ffn=self.d_ffn,
            conv_kernel=self.conv_kernel, block_kind=self.block_kind,
            n_physical=self.n_physical, max_depth=self.max_depth,
            foldable_mask=self._mask(), vocab_size=self.vocab_size,
            use_decoder=self.use_decoder)

    def _trainer_config(self) -> TrainerConfig:
        criterion = TrainingCriterion(
            lam=self.lam, alpha_p=self.alpha_p, alpha_kl=self.alpha_kl,
            use_decoder=self.use_decoder)
        return TrainerConfig(
            steps=self.steps, batch_size=self.batch_size,
            lr_peak=self.lr_peak,
            warmup_steps=int(self.steps * self.warmup_frac),
            weight_decay=self.weight_decay,
            layerdrop_max=self.layerdrop_max,
            layerdrop_mode=self.layerdrop_mode, seed=self.random_state,
            criterion=criterion)

    def _check_fitted(self) -> None:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this FoldableCTCRecognizer instance is not fitted yet")

    # -- estimator API ------------------------------------------------------

    def fit(self, X, y, dev=None):
        """Train on parallel input/target sequence lists; returns self.

        ``dev`` optionally supplies (X_dev, y_dev) for the logged dev error;
        without it a tail slice of the training data is held out for logging
        only.
        """
        inputs = validate_sequences(X, "X", 0, self.vocab_size)
        targets = validate_sequences(y, "y", 1, self.vocab_size)
        if len(inputs) != len(targets):
            raise ValueError(
                f"X has {len(inputs)} sequences but y has {len(targets)}")
        samples = [SyntheticSample(inputs=a, target=b)
                   for a, b in zip(inputs, targets)]
        if dev is not None:
            dev_x = validate_sequences(dev[0], "dev X", 0, self.vocab_size)
            dev_y = validate_sequences(dev[1], "dev y", 1, self.vocab_size)
            dev_samples = [SyntheticSample(inputs=a, target=b)
                           for a, b in zip(dev_x, dev_y)]
        else:
            held = max(1, len(samples) // 10)
            dev_samples = samples[-held:]
        cfg = self._trainer_config()
        model = FoldableEncoder.build(
            self._model_config(), np.random.default_rng(self.random_state))
        self.history_ = train(model, samples, dev_samples, cfg)
        self.model_ = model
        self.n_iter_ = cfg.steps
        return self

    def _schedule_for(self, depth, schedule) -> UnfoldSchedule:
        model = self.model_
        if schedule is not None:
            return schedule
        if depth is None:
            depth = model.config.max_depth
        return default_schedule(model.n_physical, depth,
                                model.config.foldable_mask)

    def predict(self, X, depth=None, schedule=None):
        """Greedy-decoded label sequences at the requested logical depth
        (the maximum depth by default)."""
        self._check_fitted()
        inputs = validate_sequences(X, "X", 0, self.vocab_size)
        sched = self._schedule_for(depth, schedule)
        out = []
        for seq in inputs:
            logits, _ = forward_with_schedule(self.model_, sched, seq)
            out.append(greedy_ctc_decode(logits.data))
        return out

    def score(self, X, y, depth=None):
        """1 minus the corpus token-error rate (higher is better)."""
        self._check_fitted()
        inputs = validate_sequences(X, "X", 0, self.vocab_size)
        targets = validate_sequences(y, "y", 1, self.vocab_size)
        samples = [SyntheticSample(inputs=a, target=b)
                   for a, b in zip(inputs, targets)]
        sched = self._schedule_for(depth, None)
        return 1.0 - evaluate_model(self.model_, samples, sched)

    def supported_depths(self) -> list[int]:
        """Logical depths this estimator can run at after fitting."""
        cfg = self._model_config()
        return supported_depths(cfg.n_physical, cfg.max_depth,
                                cfg.foldable_mask)
