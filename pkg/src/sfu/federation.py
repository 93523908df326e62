"""FedAvg simulation: client sampling, local SGD, weighted aggregation.

Only ``ClientUpdate`` values (parameters and a sample count) travel from
clients to the server. Server-side code never receives a client's dataset.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .data import ForgetSpec, LabeledDataset, split_forget_retain
from .errors import ConfigError, InputError, ProtocolError
from .metrics import MetricsRecord
from .nn import ParamVector, kl_loss_and_grad, one_hot

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FLConfig:
    num_clients: int = 20
    participation_fraction: float = 0.25
    local_epochs: int = 2
    batch_size: int = 32
    lr: float = 0.02
    max_rounds: int = 300
    seed: int = 0

    def __post_init__(self):
        if self.num_clients < 2:
            raise ConfigError("need at least two clients", "fl.num_clients")
        if not 0 < self.participation_fraction <= 1:
            raise ConfigError("must lie in (0, 1]", "fl.participation_fraction")
        if self.local_epochs < 0:
            raise ConfigError("must be non-negative", "fl.local_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be positive", "fl.batch_size")
        if not self.lr >= 0:
            raise ConfigError("must be non-negative", "fl.lr")
        if self.max_rounds < 0:
            raise ConfigError("must be non-negative", "fl.max_rounds")

    @property
    def clients_per_round(self) -> int:
        return max(1, int(math.floor(self.participation_fraction * self.num_clients + 0.5)))


@dataclass
class ClientState:
    id: int
    train_shard: LabeledDataset
    local_model: Optional[ParamVector] = None


@dataclass(frozen=True)
class GlobalState:
    round: int
    global_model: ParamVector
    comm_rounds: int = 0
    # client sampling is keyed on (seed, round), so the seed is the whole state
    rng_state: int = 0


class ClientUpdate(NamedTuple):
    client_id: int
    params: ParamVector
    num_samples: int


def client_rng(seed: int, round_: int, client_id: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, round_, client_id, stream])


def sample_clients(cfg: FLConfig, round_: int, rng: np.random.Generator | None = None) -> list[int]:
    if rng is None:
        rng = np.random.default_rng([cfg.seed, round_, 0xC11E])
    k = cfg.clients_per_round
    if k >= cfg.num_clients:
        return list(range(cfg.num_clients))
    return sorted(int(i) for i in rng.choice(cfg.num_clients, size=k, replace=False))


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_train(client: ClientState, global_model: ParamVector, cfg: FLConfig,
                rng: np.random.Generator) -> ParamVector:
    """Mini-batch SGD on cross-entropy, i.e. KL(one-hot label || model)."""
    shard = client.train_shard
    if len(shard) == 0:
        raise InputError(f"client {client.id} has no training data")
    values = np.array(global_model.values)
    if cfg.local_epochs == 0 or cfg.lr == 0:
        return global_model
    targets = one_hot(shard.labels, global_model.arch.num_classes)
    arch = global_model.arch
    for _ in range(cfg.local_epochs):
        for idx in minibatches(len(shard), cfg.batch_size, rng):
            params = ParamVector(arch, values)
            _, grad = kl_loss_and_grad(params, shard.samples[idx], targets[idx], np.ones(idx.size))
            values -= cfg.lr * grad / idx.size
    return ParamVector(arch, values)


def fedavg(updates: Sequence[ClientUpdate] | Sequence[tuple[ParamVector, int]]) -> ParamVector:
    """Sample-count weighted mean of client parameters.

    ``ClientUpdate`` inputs are folded in ascending client id so the result
    does not depend on the order clients finished in.
    """
    if not updates:
        raise InputError("no updates to aggregate")
    if isinstance(updates[0], ClientUpdate):
        pairs = [(u.params, u.num_samples) for u in sorted(updates, key=lambda u: u.client_id)]
    else:
        pairs = [(p, c) for p, c in updates]
    arch = pairs[0][0].arch
    for p, c in pairs:
        if p.arch != arch:
            raise ProtocolError(f"architecture mismatch: {p.arch.layer_sizes} vs {arch.layer_sizes}")
        if c < 1:
            raise InputError("sample counts must be positive")
    total = sum(c for _, c in pairs)
    weights = [c / total for _, c in pairs]
    assert abs(math.fsum(weights) - 1.0) <= 1e-12
    # offsets from the first update keep identical inputs a bitwise fixed point
    base = pairs[0][0].values
    acc = np.zeros(arch.num_params)
    for (p, _), w in zip(pairs[1:], weights[1:]):
        acc += w * (p.values - base)
    return ParamVector(arch, base + acc)


def train_client(client: ClientState, global_model: ParamVector, cfg: FLConfig, round_: int) -> ClientUpdate:
    params = local_train(client, global_model, cfg, client_rng(cfg.seed, round_, client.id))
    client.local_model = params
    return ClientUpdate(client.id, params, len(client.train_shard))


def run_round(fn: Callable[[ClientState], ClientUpdate], clients: Sequence[ClientState],
              max_workers: int = 1) -> list[ClientUpdate]:
    """Run ``fn`` on each client; results are identical with or without threads."""
    if max_workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(fn, clients))
    return [fn(c) for c in clients]


def run_fl(
    initial: ParamVector | GlobalState,
    clients: Sequence[ClientState],
    cfg: FLConfig,
    stop: Callable[[int, MetricsRecord], bool] | None = None,
    evaluate: Callable[[ParamVector], dict] | None = None,
    phase: str = "train",
    max_workers: int = 1,
) -> tuple[GlobalState, list[MetricsRecord]]:
    """FedAvg rounds until ``stop(round, record)`` is true or ``cfg.max_rounds`` elapse.

    Passing a ``GlobalState`` continues its round numbering and communication
    counter, which is how training resumes after unlearning.
    """
    if isinstance(initial, GlobalState):
        state = initial
    else:
        state = GlobalState(0, initial, 0, cfg.seed)
    by_id = {c.id: c for c in clients}
    if len(by_id) != len(clients):
        raise InputError("duplicate client ids")
    if any(cid not in by_id for cid in range(cfg.num_clients)):
        raise ConfigError(f"expected clients 0..{cfg.num_clients - 1}", "fl.num_clients")

    records: list[MetricsRecord] = []
    for _ in range(cfg.max_rounds):
        round_ = state.round + 1
        t0 = time.perf_counter_ns()
        chosen = [by_id[i] for i in sample_clients(cfg, round_)]
        active = [c for c in chosen if len(c.train_shard) > 0]
        for c in chosen:
            if len(c.train_shard) == 0:
                log.warning("round %d: client %d has no data, skipped", round_, c.id)
        model = state.global_model
        if active:
            updates = run_round(lambda c: train_client(c, model, cfg, round_), active, max_workers)
            model = fedavg(updates)
        state = GlobalState(round_, model, state.comm_rounds + 1, cfg.seed)
        scores = evaluate(model) if evaluate is not None else {"acc_retained": None}
        elapsed = round((time.perf_counter_ns() - t0) / 1e6)
        rec = MetricsRecord(
            round=round_, phase=phase,
            acc_retained=scores["acc_retained"],
            acc_forgotten=scores.get("acc_forgotten"),
            bd_asr=scores.get("bd_asr"),
            elapsed_ms=int(elapsed),
            comm_rounds_cum=state.comm_rounds,
        )
        records.append(rec)
        if stop is not None and stop(round_, rec):
            break
    return state, records


def delete_forgotten(clients: Sequence[ClientState], spec: ForgetSpec) -> list[ClientState]:
    """Each client drops its target-class samples and keeps the rest."""
    out = []
    for c in clients:
        _, retain = split_forget_retain(c.train_shard, spec)
        out.append(replace(c, train_shard=retain))
    return out


def make_clients(ds: LabeledDataset, shards: Sequence[np.ndarray]) -> list[ClientState]:
    return [ClientState(i, ds.subset(idx)) for i, idx in enumerate(shards)]
