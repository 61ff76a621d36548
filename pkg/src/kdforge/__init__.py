"""kdforge: desk-scale knowledge distillation for compact BERT-style encoders."""

from .distill import (
    DistillConfig,
    DistillReport,
    combined_loss,
    distillation_loss,
    kl_divergence,
    run_distillation,
    soften,
)
from .model import (
    EncodedBatch,
    EncoderParams,
    EncoderRun,
    ModelConfig,
    TaskHeadSpec,
    count_parameters,
    count_parameters_for_config,
    forward_mlm,
    forward_task,
    init_params,
    multi_head_attention,
)
from .optim import (
    AdamWConfig,
    AdamWState,
    EarlyStopState,
    ScheduleConfig,
    adamw_step,
    early_stop_update,
    lr_at_step,
)
from .rng import RngState
from .tokenizer import Vocabulary, build_vocab, decode, encode

__version__ = "0.1.0"

__all__ = [
    "AdamWConfig",
    "AdamWState",
    "DistillConfig",
    "DistillReport",
    "EarlyStopState",
    "EncodedBatch",
    "EncoderParams",
    "EncoderRun",
    "ModelConfig",
    "RngState",
    "ScheduleConfig",
    "TaskHeadSpec",
    "Vocabulary",
    "adamw_step",
    "build_vocab",
    "combined_loss",
    "count_parameters",
    "count_parameters_for_config",
    "decode",
    "distillation_loss",
    "early_stop_update",
    "encode",
    "forward_mlm",
    "forward_task",
    "init_params",
    "kl_divergence",
    "lr_at_step",
    "multi_head_attention",
    "run_distillation",
    "soften",
]
