"""Sparse mixture-of-experts tuning for smart-contract vulnerability detection
and explanation, built on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, set_precision
from .model import (DenseTransformer, ModelConfig, MoETransformer, count_parameters, desk_config,
                    generate, llama_3b_like, upcycle_from_dense)
from .objectives import balance_loss, balance_stats, combined_loss, task_loss
from .train import TrainConfig, continual_pretrain, moe_tune

__all__ = [
    "Tensor", "backward", "set_precision",
    "DenseTransformer", "ModelConfig", "MoETransformer", "count_parameters", "desk_config", "generate",
    "llama_3b_like", "upcycle_from_dense",
    "balance_loss", "balance_stats", "combined_loss", "task_loss",
    "TrainConfig", "continual_pretrain", "moe_tune",
]
