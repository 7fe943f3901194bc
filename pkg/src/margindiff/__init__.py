"""Diffusion-model classification with margin-based discrepancy objectives."""

from .classifier import ClassificationResult, EvalPlan, classify, evaluate, select_timesteps
from .dataset import CorruptionSpec, GlyphDataset, corrupt, gen_synthetic, load_dataset, save_dataset
from .denoiser import Architecture, Condition, DenoiserNetwork, init_network, load_checkpoint, save_checkpoint
from .errors import ArgumentError, ConfigError, FormatError, MarginDiffError, TrainingError
from .estimator import DiffusionClassifier, ImageCorruptor
from .objectives import LossConfig, NNVariant, Objective
from .sampler import SamplerConfig, ddpm_sample
from .schedule import NoiseSchedule, build_linear_schedule, forward_sample
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "Architecture", "ClassificationResult", "Condition", "ConfigError", "CorruptionSpec",
    "DenoiserNetwork", "DiffusionClassifier", "EvalPlan", "FormatError", "GlyphDataset", "ImageCorruptor",
    "LossConfig", "MarginDiffError", "NNVariant", "NoiseSchedule", "Objective", "SamplerConfig", "TrainConfig",
    "TrainingError", "build_linear_schedule", "classify", "corrupt", "ddpm_sample", "evaluate",
    "forward_sample", "gen_synthetic", "init_network", "load_checkpoint", "load_dataset", "save_checkpoint",
    "save_dataset", "select_timesteps", "train",
]
