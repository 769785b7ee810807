"""Cross-lingual transfer for low-resource text classification at desk scale.

The package trains small transformer encoders from scratch and measures how
three mechanisms move low-resource performance: translation-based embedding
initialization, hidden-state mixing with soft labels, and a graph-enhanced
encoder layer whose query/key path runs through a token graph with
translation edges. Everything is numpy-backed and deterministic per seed.
"""

from .corpus import (Dataset, Instance, SyntheticSpec, TokenizerModel,
                     build_tokenizer, encode_instance, generate_synthetic,
                     load_dataset, save_dataset)
from .errors import (BhashaError, ConfigError, ContractError,
                     MissingArtifactError, MissingPrerequisiteError,
                     NumericError, ParseError, PlanningError, SchemaError,
                     ShapeError)
from .estimator import TransferTextClassifier
from .gradcheck import run_gradient_suite
from .graph import TokenGraph, apply_edge_retention, build_token_graph
from .lexicon import Lexicon, load_lexicon, tet_initialize
from .model import (EncoderConfig, GetrConfig, HalConfig, count_parameters,
                    forward, init_params, load_checkpoint, save_checkpoint)
from .numerics import Tape, Tensor, backward, finite_diff_check
from .training import (AdamW, MetricsReport, TrainConfig, TrainedModel,
                       cross_entropy_loss, evaluate_model, kl_divergence_loss,
                       macro_f1, train_run)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "BhashaError", "ConfigError", "ContractError", "Dataset",
    "EncoderConfig", "GetrConfig", "HalConfig", "Instance", "Lexicon",
    "MetricsReport", "MissingArtifactError", "MissingPrerequisiteError",
    "NumericError", "ParseError", "PlanningError", "SchemaError", "ShapeError",
    "SyntheticSpec", "Tape", "Tensor", "TokenGraph", "TokenizerModel",
    "TrainConfig", "TrainedModel", "TransferTextClassifier",
    "apply_edge_retention", "backward", "build_token_graph", "build_tokenizer",
    "count_parameters", "cross_entropy_loss", "encode_instance",
    "evaluate_model", "finite_diff_check", "forward", "generate_synthetic",
    "init_params", "kl_divergence_loss", "load_checkpoint", "load_dataset",
    "load_lexicon", "macro_f1", "run_gradient_suite", "save_checkpoint",
    "save_dataset", "tet_initialize", "train_run",
]
