"""MiCo: multiple-instance learning with context-aware cluster routing.

Bags of instance features are routed to learnable semantic anchors by cosine
similarity with a straight-through hard assignment, refined with aggregated
anchor context, and progressively consolidated by halving the anchor set,
before a pooled bag feature feeds a survival or subtyping head.
"""

from .autodiff import Adam, Tensor, backward, zero_grad
from .data import FeatureBag, SynthConfig, generate, make_folds, read_bag, write_bag
from .kmeans import KMeansResult, fit as kmeans_fit, subsample_pool
from .losses import SubtypeLabel, SurvivalLabel, cross_entropy, survival_nll
from .metrics import binary_auc, c_index, classification_metrics
from .model import Assignment, MicoConfig, MicoModel
from .train import RunReport, TrainConfig, ablate, evaluate_model, sweep_anchors, train

__all__ = [
    "Adam", "Tensor", "backward", "zero_grad",
    "FeatureBag", "SynthConfig", "generate", "make_folds", "read_bag", "write_bag",
    "KMeansResult", "kmeans_fit", "subsample_pool",
    "SubtypeLabel", "SurvivalLabel", "cross_entropy", "survival_nll",
    "binary_auc", "c_index", "classification_metrics",
    "Assignment", "MicoConfig", "MicoModel",
    "RunReport", "TrainConfig", "ablate", "evaluate_model", "sweep_anchors", "train",
]

__version__ = "0.1.0"
