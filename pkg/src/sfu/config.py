"""Experiment configuration: one YAML tree, validated, with a single defaults table.

Schema (every key optional; omitted keys take the value in ``DEFAULTS``)::

    experiment: unlearn          # train | unlearn | retrain | backdoor-eval |
                                 # ablation | alpha-sweep | multi-class
    output_dir: runs/default
    seeds:
      data: 0                    # train/test blobs and poisoning choice
      partition: 0               # Dirichlet shard assignment
      init: 0                    # initial global model
      sampling: 0                # per-round client selection and local shuffles
      forget_teacher: 1234       # shared random forgetting teacher
    data:
      num_classes: 10
      dim: 16
      n_train_per_class: 200
      n_test_per_class: 50
      spread: 0.25
      centroid_scale: 1.0
      beta: 0.5
      hidden: [32]
    fl:
      num_clients: 20
      participation_fraction: 0.25
      local_epochs: 2
      batch_size: 32
      lr: 0.02
      max_rounds: 300            # pre-unlearning training rounds
      retrain_target_acc: 0.95   # stopping rule for the retraining baseline
      retrain_max_rounds: 1000
      resume_rounds: 5           # ordinary FedAvg rounds after unlearning
      max_workers: 1
    unlearn:
      target_classes: [5]
      multi_class_targets: [[0], [5]]
      unlearn_lr: 0.07
      local_unlearn_epochs: 2
      batch_size: 32
      max_unlearn_rounds: 10
      alpha_override: null
      forget_acc_threshold: 0.02
      retain_acc_drop_tolerance: 0.02
      double_forget_term: true
      teachers: [preserve, forget, label]
      max_rounds_target: 5       # rounds_used threshold for the exit status
      min_rounds_speedup: 10.0   # retrain rounds / unlearning rounds threshold
      alphas: null               # null means [1, default, 10 x default]
      sweep_rounds: 1
      ablation_combos: [[preserve, forget, label], [preserve, forget], [label, forget]]
      ablation_rounds: 10
    backdoor:
      enabled: false
      trigger_mask: [13, 14, 15]
      trigger_value: null        # null means 3 x data.spread
      attack_target: 0
      poison_fraction: 0.5
      min_asr_before: 0.7
      max_asr_after: 0.05
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .data import BackdoorSpec, ForgetSpec
from .errors import ConfigError
from .federation import FLConfig
from .unlearning import ALL_TEACHERS, FORGET, UnlearnConfig

EXPERIMENTS = ("train", "unlearn", "retrain", "backdoor-eval", "ablation", "alpha-sweep", "multi-class")

DEFAULTS: dict[str, Any] = {
    "experiment": "unlearn",
    "output_dir": "runs/default",
    "seeds": {"data": 0, "partition": 0, "init": 0, "sampling": 0, "forget_teacher": 1234},
    "data": {
        "num_classes": 10,
        "dim": 16,
        "n_train_per_class": 200,
        "n_test_per_class": 50,
        "spread": 0.25,
        "centroid_scale": 1.0,
        "beta": 0.5,
        "hidden": [32],
    },
    "fl": {
        "num_clients": 20,
        "participation_fraction": 0.25,
        "local_epochs": 2,
        "batch_size": 32,
        "lr": 0.02,
        "max_rounds": 300,
        "retrain_target_acc": 0.95,
        "retrain_max_rounds": 1000,
        "resume_rounds": 5,
        "max_workers": 1,
    },
    "unlearn": {
        "target_classes": [5],
        "multi_class_targets": [[0], [5]],
        "unlearn_lr": 0.07,
        "local_unlearn_epochs": 2,
        "batch_size": 32,
        "max_unlearn_rounds": 10,
        "alpha_override": None,
        "forget_acc_threshold": 0.02,
        "retain_acc_drop_tolerance": 0.02,
        "double_forget_term": True,
        "teachers": ["preserve", "forget", "label"],
        "max_rounds_target": 5,
        "min_rounds_speedup": 10.0,
        "alphas": None,
        "sweep_rounds": 1,
        "ablation_combos": [["preserve", "forget", "label"], ["preserve", "forget"], ["label", "forget"]],
        "ablation_rounds": 10,
    },
    "backdoor": {
        "enabled": False,
        "trigger_mask": [13, 14, 15],
        "trigger_value": None,
        "attack_target": 0,
        "poison_fraction": 0.5,
        "min_asr_before": 0.7,
        "max_asr_after": 0.05,
    },
}

# keys whose default is null but whose value, when present, has this type
_NULLABLE = {
    ("unlearn", "alpha_override"): float,
    ("unlearn", "alphas"): list,
    ("backdoor", "trigger_value"): float,
}


def _check_type(path: tuple[str, ...], value, default):
    key = ".".join(path)
    want = _NULLABLE.get(path)
    if want is not None:
        if value is None:
            return None
        default = want() if want is list else 0.0
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", key)
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key)
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", key)
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key)
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {value!r}", key)
    return value


def _merge(path: tuple[str, ...], defaults: dict, given: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"expected a mapping, got {type(given).__name__}", ".".join(path) or "<root>")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        sub = path + (str(k),)
        if k not in defaults:
            raise ConfigError("unknown key", ".".join(sub))
        if isinstance(defaults[k], dict):
            out[k] = _merge(sub, defaults[k], v if v is not None else {})
        else:
            out[k] = _check_type(sub, v, defaults[k])
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully resolved configuration tree."""

    tree: dict

    def __post_init__(self):
        _validate(self.tree)

    @classmethod
    def from_dict(cls, given: dict | None) -> "ExperimentConfig":
        return cls(_merge((), DEFAULTS, given or {}))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)

    def dump(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False)

    def __getitem__(self, key):
        return self.tree[key]

    @property
    def experiment(self) -> str:
        return self.tree["experiment"]

    @property
    def output_dir(self) -> Path:
        return Path(self.tree["output_dir"])

    def replace(self, **changes) -> "ExperimentConfig":
        """Override dotted keys, e.g. ``replace(**{"fl.max_rounds": 1})``."""
        tree = self.to_dict()
        for dotted, value in changes.items():
            *head, last = dotted.split(".")
            node = tree
            for h in head:
                if not isinstance(node.get(h), dict):
                    raise ConfigError("unknown key", dotted)
                node = node[h]
            if last not in node:
                raise ConfigError("unknown key", dotted)
            node[last] = value
        return ExperimentConfig.from_dict(tree)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Set every named seed except the forgetting teacher's."""
        return self.replace(**{f"seeds.{k}": seed for k in ("data", "partition", "init", "sampling")})

    def fl_config(self) -> FLConfig:
        fl = self.tree["fl"]
        return FLConfig(
            num_clients=fl["num_clients"],
            participation_fraction=fl["participation_fraction"],
            local_epochs=fl["local_epochs"],
            batch_size=fl["batch_size"],
            lr=fl["lr"],
            max_rounds=fl["max_rounds"],
            seed=self.tree["seeds"]["sampling"],
        )

    def unlearn_config(self) -> UnlearnConfig:
        u = self.tree["unlearn"]
        return UnlearnConfig(
            unlearn_lr=u["unlearn_lr"],
            local_unlearn_epochs=u["local_unlearn_epochs"],
            batch_size=u["batch_size"],
            max_unlearn_rounds=u["max_unlearn_rounds"],
            alpha_override=u["alpha_override"],
            forget_acc_threshold=u["forget_acc_threshold"],
            retain_acc_drop_tolerance=u["retain_acc_drop_tolerance"],
            forget_teacher_seed=self.tree["seeds"]["forget_teacher"],
            double_forget_term=u["double_forget_term"],
            teachers=frozenset(u["teachers"]),
        )

    def forget_spec(self) -> ForgetSpec:
        return ForgetSpec(frozenset(self.tree["unlearn"]["target_classes"]), self.tree["data"]["num_classes"])

    def multi_class_specs(self) -> list[ForgetSpec]:
        K = self.tree["data"]["num_classes"]
        return [ForgetSpec(frozenset(t), K) for t in self.tree["unlearn"]["multi_class_targets"]]

    def backdoor_spec(self) -> BackdoorSpec | None:
        b = self.tree["backdoor"]
        if not b["enabled"] and self.experiment != "backdoor-eval":
            return None
        value = b["trigger_value"]
        if value is None:
            value = 3.0 * self.tree["data"]["spread"]
        return BackdoorSpec(tuple(b["trigger_mask"]), value, b["attack_target"], b["poison_fraction"])


def _wrap(key: str, fn):
    """Run a constructor and report its errors under ``key``."""
    try:
        return fn()
    except ConfigError as e:
        if e.key is not None and e.key.startswith(key.split(".")[0] + "."):
            raise
        full = key if e.key is None or key.endswith(e.key) else f"{key}.{e.key}"
        raise ConfigError(e.detail, full) from None
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), key) from None


def _validate(tree: dict) -> None:
    if tree["experiment"] not in EXPERIMENTS:
        raise ConfigError(f"must be one of {', '.join(EXPERIMENTS)}", "experiment")
    d = tree["data"]
    if d["num_classes"] < 2:
        raise ConfigError("need at least two classes", "data.num_classes")
    for k in ("dim", "n_train_per_class", "n_test_per_class"):
        if d[k] < 1:
            raise ConfigError("must be positive", f"data.{k}")
    for k in ("spread", "centroid_scale", "beta"):
        if not d[k] > 0:
            raise ConfigError("must be positive", f"data.{k}")
    if any(not isinstance(h, int) or isinstance(h, bool) or h < 1 for h in d["hidden"]):
        raise ConfigError("hidden sizes must be positive integers", "data.hidden")

    cfg = ExperimentConfig.__new__(ExperimentConfig)
    object.__setattr__(cfg, "tree", tree)
    _wrap("fl", cfg.fl_config)
    fl = tree["fl"]
    if not 0 < fl["retrain_target_acc"] <= 1:
        raise ConfigError("must lie in (0, 1]", "fl.retrain_target_acc")
    for k in ("retrain_max_rounds", "resume_rounds"):
        if fl[k] < 0:
            raise ConfigError("must be non-negative", f"fl.{k}")
    if fl["max_workers"] < 1:
        raise ConfigError("must be at least 1", "fl.max_workers")
    if fl["num_clients"] > d["num_classes"] * d["n_train_per_class"]:
        raise ConfigError("more clients than training samples", "fl.num_clients")

    u = tree["unlearn"]
    _wrap("unlearn", cfg.unlearn_config)
    _wrap("unlearn.target_classes", cfg.forget_spec)
    specs = _wrap("unlearn.multi_class_targets", cfg.multi_class_specs)
    if not specs:
        raise ConfigError("need at least one class set", "unlearn.multi_class_targets")
    if not u["min_rounds_speedup"] > 0:
        raise ConfigError("must be positive", "unlearn.min_rounds_speedup")
    if u["max_rounds_target"] < 1:
        raise ConfigError("must be at least 1", "unlearn.max_rounds_target")
    if u["sweep_rounds"] < 1 or u["ablation_rounds"] < 1:
        raise ConfigError("must be at least 1", "unlearn.sweep_rounds" if u["sweep_rounds"] < 1 else "unlearn.ablation_rounds")
    if u["alphas"] is not None:
        if len(u["alphas"]) < 2 or any(isinstance(a, bool) or not isinstance(a, (int, float)) or not a > 0
                                       for a in u["alphas"]):
            raise ConfigError("need at least two positive values", "unlearn.alphas")
    for i, combo in enumerate(u["ablation_combos"]):
        if not isinstance(combo, list) or set(combo) - ALL_TEACHERS:
            raise ConfigError(f"teachers must be drawn from {sorted(ALL_TEACHERS)}", f"unlearn.ablation_combos[{i}]")
        if FORGET not in combo:
            raise ConfigError("the forgetting teacher is required", f"unlearn.ablation_combos[{i}]")

    b = tree["backdoor"]
    for k in ("min_asr_before", "max_asr_after"):
        if not 0 <= b[k] <= 1:
            raise ConfigError("must lie in [0, 1]", f"backdoor.{k}")
    spec = _wrap("backdoor", lambda: BackdoorSpec(
        tuple(b["trigger_mask"]), 0.0 if b["trigger_value"] is None else b["trigger_value"],
        b["attack_target"], b["poison_fraction"]))
    _wrap("backdoor", lambda: spec.validate_for(d["dim"], d["num_classes"]))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config: {e.strerror}", str(path)) from None
    try:
        given = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigError(f"not valid YAML: {e}", str(path)) from None
    return ExperimentConfig.from_dict(given)


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.dump(), encoding="utf-8")
