"""Federated round loop: client sampling, local SGD, FedAvg/FedAdam server steps,
and the Random / FT / LP / FedNCM / FedNCM+FT pipelines."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import costs
from .costs import CostLedger, CostModel
from .data import ClientShard, Dataset, DatasetSpec, PartitionSpec, dirichlet_partition
from .errors import ParameterError, ShapeError, StateError
from .headtune import aggregate_centroids, init_head_from_centroids, local_class_stats
from .model import (
    FT,
    LP,
    BackboneSpec,
    ModelParams,
    apply_update,
    build_backbone,
    evaluate,
    flatten,
    loss_and_grad,
    random_head,
    trainable_vector,
    with_trainable_vector,
)
from .rng import stream

log = logging.getLogger(__name__)

METHODS = ("random", "ft", "lp", "fedncm", "fedncm_ft")
SERVER_OPTS = ("fedavg", "fedadam")
THREADS_ENV = "FEDNCM_THREADS"


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "fedncm_ft"
    server_opt: str = "fedavg"
    rounds: int = 30
    local_epochs: int = 1
    batch_size: int = 32
    participation: float = 0.3
    client_lr: float = 0.02
    server_lr: float = 1.0
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    seed: int = 0
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    name: str = "run"

    def __post_init__(self):
        # the partition is always drawn from the run seed
        if self.partition.seed != self.seed:
            object.__setattr__(self, "partition", replace(self.partition, seed=self.seed))
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.method not in METHODS:
            raise ParameterError(f"method must be one of {METHODS}")
        if self.server_opt not in SERVER_OPTS:
            raise ParameterError(f"server_opt must be one of {SERVER_OPTS}")
        if self.rounds < 0:
            raise ParameterError("rounds must be >= 0")
        if self.local_epochs < 1:
            raise ParameterError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if not 0 < self.participation <= 1:
            raise ParameterError("participation must lie in (0, 1]")
        if self.client_lr < 0 or self.server_lr < 0:
            raise ParameterError("learning rates must be non-negative")
        b1, b2 = self.adam_betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1) or self.adam_eps <= 0:
            raise ParameterError("adam betas must lie in [0, 1) and eps must be positive")

    @property
    def train_mode(self) -> str:
        return LP if self.method == "lp" else FT

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class ServerState:
    global_params: ModelParams
    mode: str
    round_index: int = 0
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_accuracy: float
    cumulative_bytes_up: int
    cumulative_bytes_down: int
    cumulative_flops: int
    global_param_l2_from_start: float
    initial_bytes_down: int = 0
    ledger: CostLedger = field(default_factory=CostLedger, compare=False, repr=False)


@dataclass
class RunResult:
    records: list[RoundRecord]
    state: ServerState
    ledger: CostLedger
    cost_model: CostModel
    shards: list[ClientShard]


def sample_clients(
    K: int,
    participation: float,
    round: int,
    seed: int,
    client_sizes: Sequence[int] | None = None,
) -> list[int]:
    """Participants for ``round``: a uniform draw without replacement from non-empty clients.

    Draws ``max(1, round_half_up(participation * K_nonempty))`` clients and
    returns them in ascending order.
    """
    if not 0 < participation <= 1:
        raise ParameterError("participation must lie in (0, 1]")
    eligible = [k for k in range(K) if client_sizes is None or client_sizes[k] > 0]
    if not eligible:
        raise StateError("no client holds any data")
    m = max(1, min(len(eligible), math.floor(participation * len(eligible) + 0.5)))
    if m == len(eligible):
        return eligible
    chosen = stream(seed, "client-sample", round).choice(len(eligible), size=m, replace=False)
    return sorted(eligible[i] for i in chosen)


def local_train(
    shard: ClientShard,
    ds: Dataset,
    start_params: ModelParams,
    mode: str,
    local_epochs: int,
    batch_size: int,
    client_lr: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Local SGD on one client; returns the change in trainable coordinates."""
    n = shard.n_k
    if n == 0:
        raise ParameterError(f"client {shard.client_id} has no samples")
    X = ds.X[shard.sample_indices]
    y = ds.y[shard.sample_indices]
    params = start_params
    for _ in range(local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            _, grads = loss_and_grad(params, X[batch], y[batch], mode)
            params = apply_update(params, grads, client_lr)
    return trainable_vector(params, mode) - trainable_vector(start_params, mode)


def fedavg_aggregate(deltas: Sequence[tuple[int, int, np.ndarray]]) -> np.ndarray:
    """Sample-weighted mean of client deltas, reduced in ascending client id."""
    if not deltas:
        raise ParameterError("no client deltas to aggregate")
    ordered = sorted(deltas, key=lambda t: t[0])
    length = len(ordered[0][2])
    if any(len(d) != length for _, _, d in ordered):
        raise ShapeError("client deltas differ in length")
    total = sum(n for _, n, _ in ordered)
    if total <= 0:
        raise ParameterError("participants hold no samples")
    out = np.zeros(length)
    for _, n_k, delta in ordered:
        out += (n_k / total) * np.asarray(delta, dtype=np.float64)
    return out


def init_server_state(params: ModelParams, mode: str, server_opt: str) -> ServerState:
    if server_opt == "fedadam":
        size = params.trainable_count(mode)
        return ServerState(params, mode, 0, np.zeros(size), np.zeros(size))
    return ServerState(params, mode)


def server_step(state: ServerState, pseudo_gradient: np.ndarray, config: ExperimentConfig) -> ServerState:
    """Apply the aggregated client delta.

    FedAvg adds ``server_lr * delta``. FedAdam runs bias-corrected Adam with
    ``-delta`` as the gradient.
    """
    current = trainable_vector(state.global_params, state.mode)
    pg = np.asarray(pseudo_gradient, dtype=np.float64)
    if pg.shape != current.shape:
        raise ShapeError(f"pseudo-gradient length {pg.shape} != trainable length {current.shape}")
    t = state.round_index + 1
    if config.server_opt == "fedavg":
        new = current + config.server_lr * pg
        m = v = None
    else:
        if state.adam_m is None or state.adam_m.shape != current.shape:
            raise ShapeError("FedAdam moments missing or mis-sized")
        b1, b2 = config.adam_betas
        g = -pg
        m = b1 * state.adam_m + (1 - b1) * g
        v = b2 * state.adam_v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new = current - config.server_lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    params = with_trainable_vector(state.global_params, new, state.mode)
    return ServerState(params, state.mode, t, m, v)


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def initial_params(config: ExperimentConfig, dataset: Dataset) -> ModelParams:
    """Backbone and random head before any head tuning."""
    if config.method == "random":
        layers = build_backbone(config.backbone, dataset.dim, rng=stream(config.seed, "random-backbone"))
    else:
        layers = build_backbone(config.backbone, dataset.dim)
    feature_dim = layers[-1].out_dim if layers else dataset.dim
    V, b = random_head(dataset.num_classes, feature_dim, stream(config.seed, "head-init"))
    return ModelParams(layers, V, b, dataset.dim)


def fedncm_head(
    params: ModelParams,
    dataset: Dataset,
    shards: Sequence[ClientShard],
    ledger: CostLedger,
    cost_model: CostModel,
) -> tuple[ModelParams, CostLedger]:
    """Run FedNCM over every client and install the normalised-centroid head.

    Charges one forward pass per training sample and one class-stats message
    per client; the model download is the initial distribution charged by the
    caller.
    """
    stats = [local_class_stats(shard, dataset, params) for shard in shards]
    for shard, s in zip(shards, stats):
        ledger = costs.charge_local_pass(ledger, cost_model, shard.n_k, costs.FORWARD_ONLY)
        ledger = costs.charge_bytes(ledger, s.message_size(params.feature_dim), costs.UP)
    centroids = aggregate_centroids(stats, dataset.num_classes)
    V, b = init_head_from_centroids(centroids)
    return params.with_head(V, b), ledger


def simulate(
    config: ExperimentConfig,
    dataset: Dataset,
    test_set: Dataset,
    workers: int | None = None,
    on_round: Callable[[ServerState], None] | None = None,
) -> RunResult:
    """Run one experiment and return its records together with the final server state.

    ``on_round`` is called with the server state after every training round.
    """
    if test_set.dim != dataset.dim or test_set.num_classes != dataset.num_classes:
        raise ShapeError("train and test sets disagree on dimension or class count")
    workers = _default_workers() if workers is None else workers
    shards = dirichlet_partition(dataset, config.partition)
    K = len(shards)
    params = initial_params(config, dataset)
    cost_model = CostModel.from_params(params)
    ledger = costs.charge_model_transfer(CostLedger(), params.param_count(), costs.DOWN, K, initial=True)
    if config.method in ("fedncm", "fedncm_ft"):
        params, ledger = fedncm_head(params, dataset, shards, ledger, cost_model)

    start = flatten(params)

    def record(r: int, p: ModelParams) -> RoundRecord:
        return RoundRecord(
            round=r,
            test_accuracy=evaluate(p, test_set),
            cumulative_bytes_up=ledger.bytes_up,
            cumulative_bytes_down=ledger.bytes_down,
            cumulative_flops=ledger.flops,
            global_param_l2_from_start=float(np.linalg.norm(flatten(p) - start)),
            initial_bytes_down=ledger.initial_bytes_down,
            ledger=ledger,
        )

    records = [record(0, params)]
    mode = config.train_mode
    state = init_server_state(params, mode, config.server_opt)
    rounds = 0 if config.method == "fedncm" else config.rounds
    sizes = [s.n_k for s in shards]
    trainable = params.trainable_count(mode)
    pass_mode = costs.HEAD_ONLY if mode == LP else costs.FULL
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for r in range(1, rounds + 1):
            chosen = sample_clients(K, config.participation, r, config.seed, sizes)
            global_params = state.global_params

            def train(cid: int) -> np.ndarray:
                return local_train(
                    shards[cid], dataset, global_params, mode, config.local_epochs,
                    config.batch_size, config.client_lr, stream(config.seed, "local-train", r, cid),
                )

            deltas = list(pool.map(train, chosen)) if pool else [train(cid) for cid in chosen]
            ledger = costs.charge_model_transfer(ledger, trainable, costs.DOWN, len(chosen))
            for cid in chosen:
                ledger = costs.charge_local_pass(ledger, cost_model, sizes[cid] * config.local_epochs, pass_mode)
            ledger = costs.charge_model_transfer(ledger, trainable, costs.UP, len(chosen))
            pseudo = fedavg_aggregate([(cid, sizes[cid], d) for cid, d in zip(chosen, deltas)])
            state = server_step(state, pseudo, config)
            if on_round is not None:
                on_round(state)
            records.append(record(r, state.global_params))
            log.debug("round %d acc=%.4f", r, records[-1].test_accuracy)
    finally:
        if pool:
            pool.shutdown()
    return RunResult(records, state, ledger, cost_model, shards)


def run_experiment(config: ExperimentConfig, dataset: Dataset, test_set: Dataset, workers: int | None = None) -> list[RoundRecord]:
    return simulate(config, dataset, test_set, workers).records


def drift_probe(config: ExperimentConfig, dataset: Dataset) -> tuple[float, float]:
    """L2 movement of the flattened global model over one FT round,
    starting from the FedNCM head versus a random head on the same backbone."""
    if config.method == "lp":
        raise ParameterError("drift probe needs full fine-tuning")
    one_round = replace(config, rounds=1)
    tuned = simulate(replace(one_round, method="fedncm_ft"), dataset, dataset).records[-1]
    rand = simulate(replace(one_round, method="ft"), dataset, dataset).records[-1]
    return tuned.global_param_l2_from_start, rand.global_param_l2_from_start
