"""Interactive attention learning for time-series predictors.

Train a two-axis attention model, rank instances and features by negative
impact, collect ternary attention masks, and recondition the attention
generator on a latent summary of the annotations without retraining.
"""

from .data import (Dataset, SyntheticSpec, TimeSeriesInstance,
                   checkpoint_load, checkpoint_save, dataset_load,
                   dataset_save, generate_synthetic, split_dataset)
from .estimator import InteractiveAttentionEstimator
from .gradients import cg_solve, finite_diff_check, gradient, hvp
from .loop import (CERConfig, OracleConfig, RoundState, TrainConfig,
                   evaluate_model, oracle_annotate, pretrain, run_experiment,
                   run_round)
from .model import AttentionMap, AttentionNetwork, ModelConfig
from .nap import (AdaptConfig, AnnotationStore, AttentionMask, LatentSummary,
                  NeuralAttentionProcess, adapt_train)
from .params import ParamVector
from .rerank import (FeatureStats, InfluenceEngine, RerankReport,
                     ScoringContext, counterfactual_score, rerank)

__version__ = "0.1.0"

__all__ = [
    "AdaptConfig", "AnnotationStore", "AttentionMap", "AttentionMask",
    "AttentionNetwork", "CERConfig", "Dataset", "FeatureStats",
    "InfluenceEngine", "InteractiveAttentionEstimator", "LatentSummary",
    "ModelConfig", "NeuralAttentionProcess", "OracleConfig", "ParamVector",
    "RerankReport", "RoundState", "ScoringContext", "SyntheticSpec",
    "TimeSeriesInstance", "TrainConfig", "adapt_train", "cg_solve",
    "checkpoint_load", "checkpoint_save", "counterfactual_score",
    "dataset_load", "dataset_save", "evaluate_model", "finite_diff_check",
    "generate_synthetic", "gradient", "hvp", "oracle_annotate", "pretrain",
    "rerank", "run_experiment", "run_round", "split_dataset",
]
