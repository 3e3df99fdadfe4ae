"""Federated transfer learning from a feature backbone: FedNCM, linear probing,
fine-tuning and FedNCM+FT, with communication/compute accounting."""

__version__ = "0.1.0"

from .data import ClientShard, Dataset, DatasetSpec, PartitionSpec, dirichlet_partition, generate_gaussian_mixture, load_embeddings
from .engine import ExperimentConfig, RoundRecord, drift_probe, run_experiment, simulate
from .headtune import Centroids, ClassStats, aggregate_centroids, init_head_from_centroids, local_class_stats, ncm_classify
from .model import BackboneSpec, ModelParams

__all__ = [
    "BackboneSpec", "Centroids", "ClassStats", "ClientShard", "Dataset", "DatasetSpec",
    "ExperimentConfig", "ModelParams", "PartitionSpec", "RoundRecord", "aggregate_centroids",
    "dirichlet_partition", "drift_probe", "generate_gaussian_mixture", "init_head_from_centroids",
    "load_embeddings", "local_class_stats", "ncm_classify", "run_experiment", "simulate",
]
