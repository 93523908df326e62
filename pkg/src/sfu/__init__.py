"""Deterministic federated-learning simulator with multi-teacher class unlearning."""

from .data import BackdoorSpec, ForgetSpec, LabeledDataset, dirichlet_partition, gen_synthetic
from .federation import FLConfig, fedavg, run_fl
from .nn import Architecture, ParamVector, init_params
from .unlearning import UnlearnConfig, run_multi_class_sfu, run_sfu

__all__ = [
    "Architecture", "BackdoorSpec", "FLConfig", "ForgetSpec", "LabeledDataset", "ParamVector",
    "UnlearnConfig", "dirichlet_partition", "fedavg", "gen_synthetic", "init_params",
    "run_fl", "run_multi_class_sfu", "run_sfu",
]
