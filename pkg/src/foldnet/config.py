"""Structured run configuration: explicit sections for model, trainer,
criterion, and data, validated on load against every cross-field constraint
of the underlying types."""

from __future__ import annotations

from dataclasses import dataclass

import yaml

from .data import DataConfig
from .folding import ModelConfig, parse_mask
from .losses import TrainingCriterion
from .training import TrainerConfig


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    trainer: TrainerConfig
    data: DataConfig
    output_dir: str

    def to_dict(self) -> dict:
        crit = self.trainer.criterion
        return {
            "model": {
                "d_model": self.model.d_model,
                "n_heads": self.model.n_heads,
                "d_ffn": self.model.d_ffn,
                "conv_kernel": self.model.conv_kernel,
                "block_kind": self.model.block_kind,
                "n_physical": self.model.n_physical,
                "max_depth": self.model.max_depth,
                "mask": "".join("u" if m else "f" for m in self.model.foldable_mask),
                "vocab_size": self.model.vocab_size,
            },
            "trainer": {
                "steps": self.trainer.steps,
                "batch_size": self.trainer.batch_size,
                "lr_peak": self.trainer.lr_peak,
                "warmup_steps": self.trainer.warmup_steps,
                "weight_decay": self.trainer.weight_decay,
                "layerdrop_max": self.trainer.layerdrop_max,
                "layerdrop_mode": self.trainer.layerdrop_mode,
                "seed": self.trainer.seed,
                "grad_clip": self.trainer.grad_clip,
                "log_interval": self.trainer.log_interval,
            },
            "criterion": {
                "lam": crit.lam,
                "alpha_p": crit.alpha_p,
                "alpha_kl": crit.alpha_kl,
                "use_decoder": crit.use_decoder,
            },
            "data": {
                "seed": self.data.seed,
                "sizes": list(self.data.sizes),
                "t_range": list(self.data.t_range),
                "noise_rate": self.data.noise_rate,
            },
            "output_dir": self.output_dir,
        }


_REQUIRED = {
    "model": ("d_model", "n_heads", "d_ffn", "conv_kernel", "block_kind",
              "n_physical", "max_depth", "mask", "vocab_size"),
    "trainer": ("steps", "batch_size", "lr_peak", "warmup_steps", "seed"),
    "data": ("seed", "sizes", "t_range", "noise_rate"),
}


def _section(raw: dict, name: str) -> dict:
    if name not in raw:
        raise ConfigError(f"config invalid: missing section {name!r}")
    section = raw[name]
    if not isinstance(section, dict):
        raise ConfigError(f"config invalid: section {name!r} is not a mapping")
    for key in _REQUIRED.get(name, ()):
        if key not in section:
            raise ConfigError(f"config invalid: missing key {name}.{key}")
    return section


def run_config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config invalid: top level is not a mapping")
    model_d = _section(raw, "model")
    trainer_d = _section(raw, "trainer")
    crit_d = raw.get("criterion", {}) or {}
    data_d = _section(raw, "data")
    if "output_dir" not in raw:
        raise ConfigError("config invalid: missing key output_dir")

    try:
        criterion = TrainingCriterion(
            lam=float(crit_d.get("lam", 0.3)),
            alpha_p=float(crit_d.get("alpha_p", 0.25)),
            alpha_kl=float(crit_d.get("alpha_kl", 0.1)),
            use_decoder=bool(crit_d.get("use_decoder", False)))
        model = ModelConfig(
            d_model=int(model_d["d_model"]),
            n_heads=int(model_d["n_heads"]),
            d_ffn=int(model_d["d_ffn"]),
            conv_kernel=int(model_d["conv_kernel"]),
            block_kind=str(model_d["block_kind"]),
            n_physical=int(model_d["n_physical"]),
            max_depth=int(model_d["max_depth"]),
            foldable_mask=parse_mask(str(model_d["mask"]),
                                     int(model_d["n_physical"])),
            vocab_size=int(model_d["vocab_size"]),
            use_decoder=criterion.use_decoder)
        trainer = TrainerConfig(
            steps=int(trainer_d["steps"]),
            batch_size=int(trainer_d["batch_size"]),
            lr_peak=float(trainer_d["lr_peak"]),
            warmup_steps=int(trainer_d["warmup_steps"]),
            weight_decay=float(trainer_d.get("weight_decay", 0.01)),
            layerdrop_max=float(trainer_d.get("layerdrop_max", 0.0)),
            layerdrop_mode=str(trainer_d.get("layerdrop_mode",
                                             "linear-per-layer")),
            seed=int(trainer_d["seed"]),
            criterion=criterion,
            grad_clip=float(trainer_d.get("grad_clip", 5.0)),
            log_interval=int(trainer_d.get("log_interval", 100)))
        data = DataConfig(
            seed=int(data_d["seed"]),
            sizes=tuple(int(n) for n in data_d["sizes"]),
            t_range=tuple(int(n) for n in data_d["t_range"]),
            vocab_size=int(model_d["vocab_size"]),
            noise_rate=float(data_d["noise_rate"]))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config invalid: {exc}") from exc
    if len(data.sizes) != 3:
        raise ConfigError("config invalid: data.sizes must list train/dev/test")
    return RunConfig(model=model, trainer=trainer, data=data,
                     output_dir=str(raw["output_dir"]))


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    return run_config_from_dict(raw)


def save_run_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True)
