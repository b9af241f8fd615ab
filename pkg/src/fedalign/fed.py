"""Federated training: local client updates, weighted aggregation, and the round schedule."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import ClientDataset, FederationSplit
from .energy import ConfigError, EmaTracker, ServerState, global_optimize
from .model import (
    LossLambdas,
    ModelConfig,
    client_loss,
    flatten,
    forward,
    init_params,
    unflatten,
)
from .numcore import OptimizerState, make_rng, sgd_step
from .protocol import Ledger, MessageKind

STREAM_CLIENT = 31
STREAM_INIT = 32
TARGET_ID = 1000


@dataclass(frozen=True)
class FedConfig:
    rounds: int = 100
    comm_every: int = 5
    local_batch: int = 64
    lambdas: LossLambdas = LossLambdas(0.01, 0.001)
    lambda_fea: float = 0.1
    target_batch: int = 256
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    ema_alpha: float = 0.9
    baseline: str = "feda"
    seed: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.comm_every < 1:
            raise ValueError("rounds and comm_every must be >= 1")
        if self.local_batch < 1 or self.target_batch < 1:
            raise ValueError("batch sizes must be >= 1")
        if self.lambda_fea < 0:
            raise ValueError("lambda_fea must be nonnegative")
        if self.baseline not in ("feda", "fedavg"):
            raise ValueError(f"baseline must be 'feda' or 'fedavg', got {self.baseline!r}")

    def as_fedavg(self) -> "FedConfig":
        return replace(self, baseline="fedavg", lambdas=LossLambdas(0.0, 0.0), lambda_fea=0.0)


@dataclass
class ClientState:
    id: int
    dataset: ClientDataset
    params: np.ndarray
    optimizer: OptimizerState
    rng: np.random.Generator

    @property
    def labeled_size(self) -> int:
        return int(self.dataset.labeled_mask.sum())


@dataclass(frozen=True)
class HistoryRow:
    round: int
    who: str
    split: str
    accuracy: float


@dataclass
class FdgResult:
    server: ServerState
    history: list[HistoryRow]
    ledger: Ledger
    aggregations: int = 0

    def target_accuracy(self) -> float:
        return [r.accuracy for r in self.history if r.who == "target"][-1]

    def source_accuracy(self) -> float:
        last = self.history[-1].round
        vals = [r.accuracy for r in self.history if r.round == last and r.split == "val"]
        return float(np.mean(vals))


def local_train(client: ClientState, global_params: np.ndarray, epochs: int, config: FedConfig,
                model_config: ModelConfig) -> ClientState:
    """Start from the global model and run ``epochs`` shuffled passes of mini-batch SGD."""
    labeled = client.dataset.labeled_indices
    if labeled.size == 0:
        raise ConfigError(f"client {client.id} has no labeled samples")
    theta = np.array(global_params, dtype=np.float64)
    opt = OptimizerState.fresh(theta.size, config.learning_rate, config.momentum, config.weight_decay)
    rng = client.rng
    X, Y = client.dataset.features, client.dataset.labels
    for _ in range(epochs):
        order = labeled[rng.permutation(labeled.size)]
        for start in range(0, order.size, config.local_batch):
            b = order[start:start + config.local_batch]
            params = unflatten(model_config, theta, copy=False)
            trace = forward(params, X[b], rng, "train")
            _, _, grad = client_loss(params, trace, Y[b], config.lambdas)
            theta = sgd_step(theta, grad, opt)
    return ClientState(client.id, client.dataset, theta, opt, rng)


def aggregation_weights(sizes) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0 or np.any(sizes <= 0):
        raise ValueError("dataset sizes must be positive")
    return sizes / sizes.sum()


def aggregate(param_vectors, sizes) -> np.ndarray:
    """Dataset-size weighted average of client parameter vectors."""
    if len(param_vectors) == 0:
        raise ValueError("nothing to aggregate")
    if len(param_vectors) != len(sizes):
        raise ValueError(f"{len(param_vectors)} parameter vectors but {len(sizes)} sizes")
    P = np.asarray([np.asarray(p, dtype=np.float64) for p in param_vectors]) \
        if len({np.shape(p) for p in param_vectors}) == 1 else None
    if P is None or P.ndim != 2:
        raise ValueError("parameter vectors must share one length")
    w = aggregation_weights(sizes)
    out = np.zeros(P.shape[1])
    # fixed client order keeps the float sum reproducible
    for wk, pk in zip(w, P):
        out += wk * pk
    return out


def evaluate(params, dataset: ClientDataset, model_config: ModelConfig | None = None) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if not hasattr(params, "weights"):
        params = unflatten(model_config, params, copy=False)
    logits = forward(params, dataset.features, mode="eval").logits
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def default_model_config(federation: FederationSplit, hidden_dims=(32,), latent_dim=8) -> ModelConfig:
    ds = federation.sources[0]
    num_classes = int(max(
        max(int(s.labels.max()) for s in federation.sources), int(federation.target.labels.max())
    )) + 1
    return ModelConfig(ds.features.shape[1], tuple(hidden_dims), latent_dim, max(num_classes, 2))


def run_fdg(
    config: FedConfig,
    federation: FederationSplit,
    model_config: ModelConfig | None = None,
    threads: int = 1,
    cycle: int = 0,
) -> FdgResult:
    """Train the federation and return the final server state, accuracy history, and ledger.

    ``cycle`` keys the initialisation and client random streams so repeated
    training (one per active-learning cycle) starts fresh but reproducibly.
    """
    mcfg = model_config or default_model_config(federation)
    ledger = Ledger()
    theta = flatten(init_params(mcfg, make_rng(config.seed, STREAM_INIT, cycle)))
    clients = [
        ClientState(k, ds, theta, OptimizerState.fresh(theta.size, config.learning_rate,
                                                      config.momentum, config.weight_decay),
                    make_rng(config.seed, STREAM_CLIENT, k, cycle))
        for k, ds in enumerate(federation.sources)
    ]
    target = ClientState(TARGET_ID, federation.target, theta, OptimizerState.fresh(theta.size),
                         make_rng(config.seed, STREAM_CLIENT, TARGET_ID, cycle))
    server = ServerState(theta, mcfg, 0, [EmaTracker(config.ema_alpha) for _ in clients])
    history: list[HistoryRow] = []
    feda = config.baseline == "feda"
    n_periods = math.ceil(config.rounds / config.comm_every)

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        done = 0
        for period in range(n_periods):
            epochs = min(config.comm_every, config.rounds - done)
            done += epochs
            server.round = done

            starts = [ledger.to_client(MessageKind.PARAM_VECTOR, f"client_{c.id}",
                                       server.global_params, done) for c in clients]
            jobs = [(c, s) for c, s in zip(clients, starts)]
            if pool is None:
                clients = [local_train(c, s, epochs, config, mcfg) for c, s in jobs]
            else:
                clients = list(pool.map(lambda cs: local_train(cs[0], cs[1], epochs, config, mcfg), jobs))

            uploads, sizes = [], []
            for c in clients:
                uploads.append(ledger.to_server(MessageKind.PARAM_VECTOR, f"client_{c.id}", c.params, done))
                sizes.append(ledger.to_server(MessageKind.DATASET_SIZE, f"client_{c.id}",
                                              [c.labeled_size], done)[0])
            server.global_params = aggregate(uploads, sizes)

            if feda:
                server = global_optimize(server, clients, target, config, ledger)

            for c, val in zip(clients, federation.validation or [None] * len(clients)):
                if val is not None and len(val):
                    history.append(HistoryRow(done, f"client_{c.id}", "val",
                                              evaluate(server.global_params, val, mcfg)))
            history.append(HistoryRow(done, "target", "test",
                                      evaluate(server.global_params, federation.target, mcfg)))
    finally:
        if pool is not None:
            pool.shutdown()
    return FdgResult(server, history, ledger, n_periods)


def write_history_csv(history: list[HistoryRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_or_target", "split", "accuracy"])
        for r in history:
            w.writerow([r.round, r.who, r.split, f"{r.accuracy:.6f}"])
