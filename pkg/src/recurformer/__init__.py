"""Hybrid attention / selective-state-space decoder with recency-driven head replacement."""

from .attention import AttentionConfig, AttentionRecord, CausalSelfAttention, KVCache, rope_apply
from .cache import closed_form_fraction, fraction_table, llama2_7b_shape, measured_stats
from .model import (
    HeadAssignment,
    ModelConfig,
    RecurFormer,
    RecurFormerBlock,
    convert_model,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .recency import RecencyReport, RRConfig, build_report, contribution_stats, recency_ratio
from .ssm import MambaBlock, MambaConfig, MambaState
from .tasks import generate_hashhop, generate_mqar, score_hashhop, score_mqar
from .tensor import CheckpointError, ContractError, DimensionError, NumericError, load_tensors, save_tensors
from .training import TrainConfig, TrainTrace, continual_train, train_mqar_ablation

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "AttentionRecord",
    "CausalSelfAttention",
    "CheckpointError",
    "ContractError",
    "DimensionError",
    "HeadAssignment",
    "KVCache",
    "MambaBlock",
    "MambaConfig",
    "MambaState",
    "ModelConfig",
    "NumericError",
    "RRConfig",
    "RecencyReport",
    "RecurFormer",
    "RecurFormerBlock",
    "TrainConfig",
    "TrainTrace",
    "build_report",
    "closed_form_fraction",
    "continual_train",
    "contribution_stats",
    "convert_model",
    "fraction_table",
    "generate_hashhop",
    "generate_mqar",
    "llama2_7b_shape",
    "load_checkpoint",
    "load_tensors",
    "measured_stats",
    "model_forward",
    "recency_ratio",
    "rope_apply",
    "save_checkpoint",
    "save_tensors",
    "score_hashhop",
    "score_mqar",
    "train_mqar_ablation",
]
