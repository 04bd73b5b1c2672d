"""
Stage-one training and pseudo-label fine-tuning
"""

from cratertan.training.trainer import Trainer, TrainConfig, OptimizerConfig
from cratertan.training.spf import SPFConfig, finetune, generate_pseudo_labels

__all__ = ["Trainer", "TrainConfig", "OptimizerConfig", "SPFConfig", "finetune", "generate_pseudo_labels"]
