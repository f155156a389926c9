"""Counting-aware contrastive fine-tuning for dual-encoder vision-language models."""

from .captions import (
    CountingCaption,
    detect_count,
    make_all_counterfactuals,
    make_candidate_captions,
    make_counterfactual,
)
from .estimator import CountingFineTuner
from .evaluator import EvalReport, evaluate, predict_count
from .frequencies import ClassFrequencyTable, compute_class_frequencies
from .lambdas import LambdaScheme, LambdaTable, LambdaWeighter, lambda_for
from .losses import EmbeddingBatch, clip_contrastive_loss, combined_loss, count_loss, count_plus_loss
from .trainer import Checkpoint, TrainingConfig, fit, lr_at, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "ClassFrequencyTable",
    "CountingCaption",
    "CountingFineTuner",
    "EmbeddingBatch",
    "EvalReport",
    "LambdaScheme",
    "LambdaTable",
    "LambdaWeighter",
    "TrainingConfig",
    "clip_contrastive_loss",
    "combined_loss",
    "compute_class_frequencies",
    "count_loss",
    "count_plus_loss",
    "detect_count",
    "evaluate",
    "fit",
    "lambda_for",
    "lr_at",
    "make_all_counterfactuals",
    "make_candidate_captions",
    "make_counterfactual",
    "predict_count",
    "save_checkpoint",
]
