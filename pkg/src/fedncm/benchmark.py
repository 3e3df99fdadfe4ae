"""The standard synthetic benchmark: 10 classes, 16-d inputs, 200 samples per
class, 20 clients, Dirichlet alpha 0.1."""

from __future__ import annotations

from dataclasses import replace

from .data import Dataset, DatasetSpec, PartitionSpec
from .engine import ExperimentConfig

DATASET = DatasetSpec(num_classes=10, dim=16, per_class=200, test_per_class=100, class_sep=4.0, noise_sigma=1.0)
NUM_CLIENTS = 20
ALPHA = 0.1


def benchmark_config(seed: int, method: str = "fedncm_ft", alpha: float = ALPHA, **overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        name=f"benchmark-{method}",
        method=method,
        partition=PartitionSpec(NUM_CLIENTS, alpha),
        dataset=replace(DATASET, seed=seed),
        seed=seed,
    )
    return replace(cfg, **overrides) if overrides else cfg


def benchmark_data(seed: int) -> tuple[Dataset, Dataset]:
    return replace(DATASET, seed=seed).load()
