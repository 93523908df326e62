"""Builds the simulated federation an experiment runs on.

Each named seed feeds its own generator, keyed as ``[seed, stream]``:

=========  =================  ======
seed       what it drives     stream
=========  =================  ======
data       training blobs     1
data       test blobs         2
partition  Dirichlet shards   3
init       initial model      4
data       poisoned subset    5
=========  =================  ======

Client sampling and local shuffles take ``seeds.sampling`` through
``FLConfig.seed``; the forgetting teacher takes ``seeds.forget_teacher``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

from .config import ExperimentConfig
from .data import (
    BackdoorSpec,
    ClientPartition,
    ForgetSpec,
    LabeledDataset,
    dirichlet_partition,
    gen_synthetic,
    inject_backdoor,
)
from .federation import ClientState, FLConfig, GlobalState, delete_forgotten, make_clients, run_fl
from .metrics import Evaluator, MetricsRecord
from .nn import Architecture, ParamVector, init_params
from .unlearning import UnlearnConfig


@dataclass(frozen=True)
class World:
    cfg: ExperimentConfig
    arch: Architecture
    train: LabeledDataset
    test: LabeledDataset
    partition: ClientPartition
    initial: ParamVector
    fl: FLConfig
    unlearn: UnlearnConfig
    spec: ForgetSpec
    backdoor: Optional[BackdoorSpec]

    @property
    def max_workers(self) -> int:
        return self.cfg["fl"]["max_workers"]

    def clients(self) -> list[ClientState]:
        """Fresh client states over the (possibly poisoned) training data."""
        return make_clients(self.train, self.partition.client_shards)

    def evaluator(self, spec: ForgetSpec | None = None, with_backdoor: bool = True) -> Evaluator:
        spec = self.spec if spec is None else spec
        return Evaluator(self.test, spec, self.backdoor if with_backdoor else None)


def build_world(cfg: ExperimentConfig, spec: ForgetSpec | None = None) -> World:
    """Generate data, poison it if configured, and partition it over clients.

    The backdoor, when enabled, is planted in the classes of ``spec``
    (default: ``unlearn.target_classes``).
    """
    d, seeds = cfg["data"], cfg["seeds"]
    spec = cfg.forget_spec() if spec is None else spec
    K, dim = d["num_classes"], d["dim"]
    train = gen_synthetic(K, dim, d["n_train_per_class"], d["spread"], [seeds["data"], 1], d["centroid_scale"])
    test = gen_synthetic(K, dim, d["n_test_per_class"], d["spread"], [seeds["data"], 2], d["centroid_scale"])
    backdoor = cfg.backdoor_spec()
    if backdoor is not None:
        train = inject_backdoor(train, backdoor, spec.target_classes, [seeds["data"], 5])
    fl = cfg.fl_config()
    partition = dirichlet_partition(train, fl.num_clients, d["beta"], [seeds["partition"], 3])
    arch = Architecture((dim, *d["hidden"], K))
    return World(
        cfg=cfg, arch=arch, train=train, test=test, partition=partition,
        initial=init_params(arch, [seeds["init"], 4]), fl=fl, unlearn=cfg.unlearn_config(),
        spec=spec, backdoor=backdoor,
    )


def pretrain(world: World, evaluator: Evaluator | None = None) -> tuple[GlobalState, list[MetricsRecord]]:
    """Ordinary FedAvg for ``fl.max_rounds`` rounds from the initial model."""
    return run_fl(world.initial, world.clients(), world.fl, evaluate=evaluator,
                  phase="train", max_workers=world.max_workers)


def retrain(world: World, spec: ForgetSpec | None = None,
            evaluator: Evaluator | None = None) -> tuple[GlobalState, list[MetricsRecord]]:
    """Train from scratch on the data left after deletion.

    Stops at the first round whose retained accuracy reaches
    ``fl.retrain_target_acc``, or after ``fl.retrain_max_rounds``.
    """
    spec = world.spec if spec is None else spec
    evaluator = world.evaluator(spec) if evaluator is None else evaluator
    target = world.cfg["fl"]["retrain_target_acc"]
    fl = replace(world.fl, max_rounds=world.cfg["fl"]["retrain_max_rounds"])
    clients = delete_forgotten(world.clients(), spec)
    return run_fl(world.initial, clients, fl, stop=lambda _r, rec: rec.acc_retained >= target,
                  evaluate=evaluator, phase="retrain", max_workers=world.max_workers)
