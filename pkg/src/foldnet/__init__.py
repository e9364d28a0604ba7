"""Foldable sequence encoders: compact seed models whose physical layers
unfold to arbitrary logical depths, trained jointly with stop-gradient
self-distillation."""

from .autodiff import (
    Tensor,
    backward,
    finite_diff_check,
    forward_op,
    parameter,
    stop_gradient,
)
from .blocks import (
    BlockConfig,
    BlockParams,
    block_param_count,
    conformer_block_forward,
    embed_inputs,
    init_block_params,
    project_logits,
    toy_decoder_forward,
    transformer_block_forward,
)
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_run_config, save_run_config
from .data import DataConfig, SyntheticSample, generate_dataset
from .estimator import FoldableCTCRecognizer
from .evaluation import (
    RobustnessReport,
    SensitivityReport,
    drop_layers,
    error_rate,
    evaluate_across_schedules,
    evaluate_model,
    greedy_ctc_decode,
    layer_sensitivity,
    parameter_report,
)
from .folding import (
    FoldableEncoder,
    ModelConfig,
    UnfoldSchedule,
    count_schedules,
    default_schedule,
    enumerate_schedules,
    forward_with_schedule,
    parse_schedule,
    supported_depths,
    untie,
    validate_schedule,
)
from .losses import (
    LossBreakdown,
    OutputDistribution,
    TrainingCriterion,
    attention_ce_loss,
    ctc_brute_force,
    ctc_loss,
    interpolated_loss,
    joint_criterion,
    kl_self_distillation,
)
from .training import (
    OptimizerState,
    TrainerConfig,
    adamw_update,
    layerdrop_sample,
    lr_at,
    train,
    train_step,
)

__version__ = "0.1.0"
