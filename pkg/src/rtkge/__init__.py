"""Temporal knowledge-graph embeddings with relative time context."""

from .kg import EntityType, TemporalKG, build_graph, split_random, split_temporal, stats
from .model import ModelConfig, TemporalKGE, load_checkpoint, param_count, save_checkpoint
from .training import TrainConfig, train_loop
from .evaluation import EvalOptions, Evaluator, aggregate, evaluate

__version__ = "0.1.0"

__all__ = [
    "EntityType", "TemporalKG", "build_graph", "split_random", "split_temporal", "stats",
    "ModelConfig", "TemporalKGE", "load_checkpoint", "param_count", "save_checkpoint",
    "TrainConfig", "train_loop", "EvalOptions", "Evaluator", "aggregate", "evaluate",
]
