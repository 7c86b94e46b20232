"""Simulator for clustered, calibrated federated recommendation over NCF models."""

from cali3f.data import InteractionTable, build_shards, parse_ratings
from cali3f.evaluation import MetricHistory, rounds_to_threshold
from cali3f.federation import ClusterConfig, Federation, run_experiment
from cali3f.models import TrainConfig, init_model

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig",
    "Federation",
    "InteractionTable",
    "MetricHistory",
    "TrainConfig",
    "build_shards",
    "init_model",
    "parse_ratings",
    "rounds_to_threshold",
    "run_experiment",
]
