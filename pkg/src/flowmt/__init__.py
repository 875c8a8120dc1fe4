"""Unsupervised translation with per-language normalizing flows."""

from .config import (
    CipherSpec,
    Config,
    FlowConfig,
    NoiseConfig,
    TrainConfig,
    TransformerConfig,
    config_from_dict,
    load_config,
)
from .errors import (
    ConfigurationError,
    DataError,
    FlowmtError,
    NumericError,
    UsageError,
)
from .flows import FlowStack, StandardNormal, transform_latent
from .metrics import BleuReport, bleu, bleu_from_strings
from .model import TranslationModel
from .vocab import TokenSequence, Vocabulary

__version__ = "0.1.0"

__all__ = [
    "BleuReport",
    "CipherSpec",
    "Config",
    "ConfigurationError",
    "DataError",
    "FlowConfig",
    "FlowStack",
    "FlowmtError",
    "NoiseConfig",
    "NumericError",
    "StandardNormal",
    "TokenSequence",
    "TrainConfig",
    "TransformerConfig",
    "TranslationModel",
    "UsageError",
    "Vocabulary",
    "bleu",
    "bleu_from_strings",
    "config_from_dict",
    "load_config",
    "transform_latent",
    "__version__",
]
