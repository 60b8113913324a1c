"""Transformer language models with adaptive input embeddings and an adaptive softmax."""
from ._kernels import BACKEND
from .adaptive_softmax import AdaptiveSoftmax, FullSoftmax, TyingConfig, tie
from .config import ConfigError, RunConfig, load_preset, preset_names, tiny
from .evaluate import EvalReport, bin_loss, evaluate, word_level
from .inputs import AdaptiveInputEmbedding, CharCnnInput, FixedEmbedding
from .model import LanguageModel, build_model
from .optim import LrSchedule, Nesterov, clip_gradients
from .params import ParamBreakdown, count_parameters
from .trainer import Trainer, load_model, read_checkpoint, write_checkpoint
from .vocab import ClusterPartition, Vocabulary, build_vocabulary

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "AdaptiveInputEmbedding",
    "AdaptiveSoftmax",
    "CharCnnInput",
    "ClusterPartition",
    "ConfigError",
    "EvalReport",
    "FixedEmbedding",
    "FullSoftmax",
    "LanguageModel",
    "LrSchedule",
    "Nesterov",
    "ParamBreakdown",
    "RunConfig",
    "Trainer",
    "TyingConfig",
    "Vocabulary",
    "bin_loss",
    "build_model",
    "build_vocabulary",
    "clip_gradients",
    "count_parameters",
    "evaluate",
    "load_model",
    "load_preset",
    "preset_names",
    "read_checkpoint",
    "tie",
    "tiny",
    "word_level",
    "write_checkpoint",
]
