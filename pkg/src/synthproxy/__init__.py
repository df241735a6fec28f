"""Desk-scale toolkit for distilling software synthesizers into neural preset encoders.

The pipeline: sample presets from a synthesizer's parameter space, render them
to audio, embed the audio with a fixed hand-crafted feature extractor, then
train a neural encoder to map presets straight to those embeddings.  Trained
encoders are evaluated by retrieval (MRR), average L1, and perceptual ranking
scores, and can serve as frozen differentiable stand-ins for the synthesizer
inside a sound-matching loop.
"""

from synthproxy.presets import ParamSpec, Preset, PresetSpace, one_hot, sample_preset, validate
from synthproxy.synths import AudioBuffer, RenderConfig, fmtoy_space, render, rms, subtoy_space
from synthproxy.features import Embedding, FeatureConfig, embed, embedding_dim, embedding_distance, spectral_metrics
from synthproxy.data import EmbeddingDataset, generate, read_dataset, split, write_dataset
from synthproxy.encoders import EncoderConfig, build_encoder, encode_values
from synthproxy.evaluate import MrrConfig, avg_l1, builtin_ranking_groups, cluster_wasserstein, mrr, ranking_score, spearman
from synthproxy.training import TrainResult, distill_train, load_encoder, predictor_from_checkpoint
from synthproxy.ssm import (
    EstimatorConfig,
    FrozenProxy,
    PresetEstimator,
    ScheduleConfig,
    SoftPreset,
    SsmTrainConfig,
    embedding_loss,
    harden,
    load_estimator,
    param_loss,
    schedule_weights,
    soft_from_values,
    ssm_eval,
    ssm_train,
)

__version__ = "0.1.0"

__all__ = [
    "ParamSpec",
    "Preset",
    "PresetSpace",
    "one_hot",
    "sample_preset",
    "validate",
    "AudioBuffer",
    "RenderConfig",
    "render",
    "rms",
    "subtoy_space",
    "fmtoy_space",
    "Embedding",
    "FeatureConfig",
    "embed",
    "embedding_dim",
    "embedding_distance",
    "spectral_metrics",
    "EmbeddingDataset",
    "generate",
    "read_dataset",
    "split",
    "write_dataset",
    "EncoderConfig",
    "build_encoder",
    "encode_values",
    "MrrConfig",
    "avg_l1",
    "builtin_ranking_groups",
    "cluster_wasserstein",
    "mrr",
    "ranking_score",
    "spearman",
    "TrainResult",
    "distill_train",
    "load_encoder",
    "predictor_from_checkpoint",
    "EstimatorConfig",
    "FrozenProxy",
    "PresetEstimator",
    "ScheduleConfig",
    "SoftPreset",
    "SsmTrainConfig",
    "embedding_loss",
    "harden",
    "load_estimator",
    "param_loss",
    "schedule_weights",
    "soft_from_values",
    "ssm_eval",
    "ssm_train",
]
