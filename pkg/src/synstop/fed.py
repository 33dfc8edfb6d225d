"""Federated round engine: client sampling, local updates, aggregation, telemetry.

Local update rules (``edge_opt``):

* ``fedavg``: minibatch SGD.
* ``fedsam``: SAM steps; the gradient is taken at ``w + rho * g / ||g||``.
* ``feddyn``: SGD on ``L(w) - <lambda_k, w> + mu/2 ||w - w_g||^2``, then
  ``lambda_k -= mu (w_k - w_g)``.

Aggregation (``server_opt``) is the uniform mean in ascending client-id order;
FedDyn additionally keeps a server drift state ``h`` and subtracts ``h / mu``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import ClientShard, Dataset, ProxyValSet, substream
from .earlystop import EXACT_MATCH, accuracy, evaluate
from .model import ContractError, ModelParams, _bce_rows, _forward, loss_and_grad

METHODS = ("fedavg", "fedsam", "feddyn")
DEFAULT_METHOD_PARAMS = {"sam_rho": 0.05, "feddyn_mu": 0.01}

_SAMPLE, _SHUFFLE = 21, 22


class DivergenceError(RuntimeError):
    def __init__(self, round_idx: int, client_id: int | None, detail: str = "non-finite parameters"):
        self.round = round_idx
        self.client_id = client_id
        where = f"round {round_idx}" + (f", client {client_id}" if client_id is not None else ", server")
        super().__init__(f"divergence at {where}: {detail}")

    def as_record(self) -> dict:
        return {"error": "divergence", "round": self.round, "client_id": self.client_id, "message": str(self)}


@dataclass(frozen=True)
class FedConfig:
    n_clients: int = 100
    clients_per_round: int = 10
    rounds: int = 100
    local_steps: int = 5
    batch_size: int = 32
    lr: float = 3.0
    method: str = "fedavg"
    method_params: dict = field(default_factory=dict)
    hidden_dim: int = 0

    def __post_init__(self):
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ContractError("need 1 <= clients_per_round <= n_clients")
        if self.rounds < 1 or self.local_steps < 0 or self.batch_size < 1:
            raise ContractError("rounds and batch_size must be positive, local_steps non-negative")
        if self.lr < 0:
            raise ContractError("lr must be non-negative")
        if self.method not in METHODS:
            raise ContractError(f"unknown method {self.method!r}; choose from {METHODS}")
        unknown = set(self.method_params) - set(DEFAULT_METHOD_PARAMS)
        if unknown:
            raise ContractError(f"unknown method_params {sorted(unknown)}")

    def param(self, name: str) -> float:
        return float(self.method_params.get(name, DEFAULT_METHOD_PARAMS[name]))


@dataclass
class StrategyState:
    """Mutable per-run strategy state; only FedDyn uses it."""

    corrections: dict[int, np.ndarray] = field(default_factory=dict)
    server_h: np.ndarray | None = None

    def correction(self, client_id: int, size: int) -> np.ndarray:
        if client_id not in self.corrections:
            self.corrections[client_id] = np.zeros(size)
        return self.corrections[client_id]


@dataclass(frozen=True)
class RoundRecord:
    """Telemetry for one global round; metrics describe the model it produced."""

    round: int
    participants: tuple[int, ...]
    val_acc_syn: float
    test_acc: float
    global_loss: float
    wall_time: float = 0.0

    @property
    def model_round(self) -> int:
        return self.round + 1


def sample_clients(n_clients: int, k: int, round_idx: int, seed: int) -> list[int]:
    if not 1 <= k <= n_clients:
        raise ContractError(f"cannot sample {k} of {n_clients} clients")
    rng = substream(seed, _SAMPLE, round_idx)
    return sorted(int(i) for i in rng.choice(n_clients, size=k, replace=False))


def minibatch_schedule(n: int, steps: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffle, then contiguous batches that wrap around the permutation."""
    perm = rng.permutation(n)
    b = min(batch_size, n)
    return [perm[(t * b + np.arange(b)) % n] for t in range(steps)]


def edge_opt(
    method: str,
    global_params: ModelParams,
    features: np.ndarray,
    labels: np.ndarray,
    state: StrategyState,
    config: FedConfig,
    client_id: int,
    round_idx: int,
    seed: int,
) -> ModelParams:
    if method not in METHODS:
        raise ContractError(f"unknown method {method!r}")
    if len(features) == 0:
        raise ContractError(f"client {client_id} has no data")
    arch = global_params.arch
    w_global = global_params.values
    w = w_global.copy()
    y = np.asarray(labels, dtype=np.float64)
    rng = substream(seed, _SHUFFLE, round_idx, client_id)
    batches = minibatch_schedule(len(features), config.local_steps, config.batch_size, rng)
    lr = config.lr

    if method == "feddyn":
        mu = config.param("feddyn_mu")
        lam = state.correction(client_id, arch.n_params)
    elif method == "fedsam":
        rho = config.param("sam_rho")

    with np.errstate(over="ignore", invalid="ignore"):
        for idx in batches:
            xb, yb = features[idx], y[idx]
            _, g = loss_and_grad(w, arch, xb, yb)
            if method == "fedsam":
                norm = np.sqrt(np.dot(g, g))
                eps = rho * g / norm if norm >= 1e-12 else np.zeros_like(g)
                _, g = loss_and_grad(w + eps, arch, xb, yb)
            elif method == "feddyn":
                g = g - lam + mu * (w - w_global)
            w = w - lr * g
            if not np.all(np.isfinite(w)):
                raise DivergenceError(round_idx, client_id)

    if method == "feddyn":
        state.corrections[client_id] = lam - mu * (w - w_global)
    return ModelParams(w, arch)


def server_opt(
    method: str,
    global_params: ModelParams,
    local_models: dict[int, ModelParams],
    state: StrategyState,
    config: FedConfig,
    round_idx: int = -1,
) -> ModelParams:
    """Aggregate client models keyed by client id."""
    if not local_models:
        raise ContractError("no client models to aggregate")
    size = global_params.values.shape[0]
    ordered = [local_models[k].values for k in sorted(local_models)]
    if any(v.shape[0] != size for v in ordered):
        raise ContractError("client models disagree on parameter count")
    mean = np.mean(np.stack(ordered), axis=0)
    if method in ("fedavg", "fedsam"):
        out = mean
    elif method == "feddyn":
        mu = config.param("feddyn_mu")
        h = state.server_h if state.server_h is not None else np.zeros(size)
        drift = np.sum(np.stack(ordered) - global_params.values, axis=0)
        state.server_h = h - (mu / config.n_clients) * drift
        out = mean - state.server_h / mu
    else:
        raise ContractError(f"unknown method {method!r}")
    if not np.all(np.isfinite(out)):
        raise DivergenceError(round_idx, None)
    return ModelParams(out, global_params.arch)


def global_risk(params: ModelParams, train: Dataset, shards: Sequence[ClientShard]) -> float:
    """Uniform average of client objectives over all shards."""
    z, _ = _forward(params.values, params.arch, train.features)
    per_example = _bce_rows(z, train.labels.astype(np.float64))
    return float(np.mean([per_example[s.example_indices].mean() for s in shards]))


def evaluate_global(
    params: ModelParams,
    train: Dataset,
    shards: Sequence[ClientShard],
    proxy: ProxyValSet,
    test: Dataset,
    metric_mode: str = EXACT_MATCH,
) -> tuple[float, float, float]:
    """(proxy accuracy, test accuracy, global loss) of a global model."""
    return (
        evaluate(proxy, params, metric_mode),
        accuracy(params, test.features, test.labels, metric_mode),
        global_risk(params, train, shards),
    )


def run_round(
    round_idx: int,
    global_params: ModelParams,
    shards: Sequence[ClientShard],
    train: Dataset,
    proxy: ProxyValSet,
    test: Dataset,
    state: StrategyState,
    config: FedConfig,
    seed: int,
    metric_mode: str = EXACT_MATCH,
) -> tuple[ModelParams, RoundRecord]:
    t0 = time.perf_counter()
    participants = sample_clients(config.n_clients, config.clients_per_round, round_idx, seed)
    local_models = {}
    for k in participants:
        x, y = train.subset(shards[k].example_indices)
        local_models[k] = edge_opt(config.method, global_params, x, y, state, config, k, round_idx, seed)
    new_global = server_opt(config.method, global_params, local_models, state, config, round_idx)
    val, test_acc, loss = evaluate_global(new_global, train, shards, proxy, test, metric_mode)
    record = RoundRecord(round_idx, tuple(participants), val, test_acc, loss, time.perf_counter() - t0)
    return new_global, record
