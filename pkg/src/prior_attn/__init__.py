"""Learnable temporal attention priors in a miniature transformer world model."""

from .attention import MultiHeadAttention, PriorParams
from .autodiff import GraphTape, Tensor, backward, grad_check, no_grad, parameter
from .biases import AttentionKind, adaptive_soft_mask, causal_bias, combined_bias, gaussian_bias
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .kernels import BACKEND
from .model import (
    DynamicsOutput,
    ModelConfig,
    PredictionOutput,
    WorldModel,
    load_checkpoint,
    save_checkpoint,
    simnorm,
)
from .tasks import Dataset, TaskSpec, TrajectoryBatch, generate, make_batches
from .trainer import AdamW, LossBreakdown, TrainReport, clip_gradients, compute_loss, evaluate, train_run

__version__ = "0.1.0"

__all__ = [
    "AdamW",
    "AttentionKind",
    "BACKEND",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DimensionError",
    "DynamicsOutput",
    "GraphTape",
    "LossBreakdown",
    "ModelConfig",
    "MultiHeadAttention",
    "NumericError",
    "PredictionOutput",
    "PriorParams",
    "TaskSpec",
    "Tensor",
    "TrainReport",
    "TrajectoryBatch",
    "WorldModel",
    "adaptive_soft_mask",
    "backward",
    "causal_bias",
    "clip_gradients",
    "combined_bias",
    "compute_loss",
    "evaluate",
    "gaussian_bias",
    "generate",
    "grad_check",
    "load_checkpoint",
    "make_batches",
    "no_grad",
    "parameter",
    "save_checkpoint",
    "simnorm",
    "train_run",
]
