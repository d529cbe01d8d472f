"""Attention-MIL classifier with Adam-aware gradient tracing.

Train a bag classifier on synthetic data, score training instances against
misclassified validation bags, prune and retrain, or rank training bags by
self-influence to surface label disagreements.
"""

from .influence import influence_table, self_influence_scores, tracin_pair
from .model import Bag, ModelConfig, ModelParams, classify_bag, init_params
from .prune import PruneConfig, flag_removals, run_pipeline, simulate_dual_reader_audit
from .synth import SynthConfig, make_dataset
from .train import TrainConfig, replay_verify, train

__version__ = "0.1.0"

__all__ = [
    "Bag", "ModelConfig", "ModelParams", "PruneConfig", "SynthConfig", "TrainConfig",
    "classify_bag", "flag_removals", "influence_table", "init_params", "make_dataset",
    "replay_verify", "run_pipeline", "self_influence_scores", "simulate_dual_reader_audit",
    "tracin_pair", "train",
]
