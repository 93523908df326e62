"""Accuracy, backdoor success rate and the per-round metrics record."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, asdict
from typing import Iterable, Optional

import numpy as np

from .data import BackdoorSpec, ForgetSpec, LabeledDataset, apply_trigger_only, split_forget_retain
from .errors import ConfigError, MetricError
from .nn import ParamVector, predict_class

PHASES = ("train", "unlearn", "resume", "retrain")

# wall time lives in a separate file so the metrics CSV is byte-reproducible
METRICS_COLUMNS = ("round", "phase", "acc_retained", "acc_forgotten", "bd_asr", "comm_rounds_cum")
TIMING_COLUMNS = ("round", "phase", "elapsed_ms")


@dataclass(frozen=True)
class MetricsRecord:
    round: int
    phase: str
    acc_retained: Optional[float]
    acc_forgotten: Optional[float] = None
    bd_asr: Optional[float] = None
    elapsed_ms: int = 0
    comm_rounds_cum: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}", "phase")
        for name in ("acc_retained", "acc_forgotten", "bd_asr"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise MetricError(f"{name}={v} outside [0, 1]")
        if self.elapsed_ms < 0:
            raise MetricError("elapsed time cannot be negative")

    def to_row(self) -> dict:
        return asdict(self)


def accuracy(model: ParamVector, ds: LabeledDataset) -> float:
    if len(ds) == 0:
        raise MetricError("accuracy of an empty dataset is undefined")
    return float(np.mean(predict_class(model, ds.samples) == ds.labels))


def bd_asr(model: ParamVector, clean_test: LabeledDataset, spec: BackdoorSpec) -> float:
    """Share of triggered inputs classified as the attacker's target.

    Samples whose true class already is the target are left out.
    """
    eligible = clean_test.subset(np.flatnonzero(clean_test.origin_labels != spec.attack_target))
    if len(eligible) == 0:
        raise MetricError("no test sample outside the attack target class")
    triggered = apply_trigger_only(eligible, spec)
    return float(np.mean(predict_class(model, triggered.samples) == spec.attack_target))


class Evaluator:
    """Server-side evaluation on a held-out test split.

    ``forget`` is the union of every class requested for removal so far; the
    retained split is everything else. The backdoor rate is measured on the
    forgotten test samples, matching the "BD_ASR on forgotten data" column.
    """

    def __init__(self, test: LabeledDataset, forget: ForgetSpec | None = None,
                 backdoor: BackdoorSpec | None = None):
        self.test = test
        self.forget = forget
        self.backdoor = backdoor
        if forget is None:
            self.forget_test, self.retain_test = None, test
        else:
            self.forget_test, self.retain_test = split_forget_retain(test, forget)
        if backdoor is not None and self.forget_test is None:
            raise ConfigError("backdoor evaluation needs a forget spec", "backdoor")

    def __call__(self, model: ParamVector) -> dict:
        out = {"acc_retained": accuracy(model, self.retain_test), "acc_forgotten": None,
               "acc_forgotten_worst": None, "bd_asr": None}
        if self.forget_test is not None and len(self.forget_test):
            pred = predict_class(model, self.forget_test.samples)
            hit = pred == self.forget_test.labels
            out["acc_forgotten"] = float(np.mean(hit))
            # per-class maximum, so one class cannot hide behind another
            out["acc_forgotten_worst"] = max(
                float(np.mean(hit[self.forget_test.labels == c])) for c in np.unique(self.forget_test.labels)
            )
            if self.backdoor is not None:
                out["bd_asr"] = bd_asr(model, self.forget_test, self.backdoor)
        return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_metrics_csv(records: Iterable[MetricsRecord], path, timing_path=None) -> None:
    records = list(records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([_fmt(getattr(r, c)) for c in METRICS_COLUMNS])
    if timing_path is not None:
        with open(timing_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMING_COLUMNS)
            for r in records:
                w.writerow([_fmt(getattr(r, c)) for c in TIMING_COLUMNS])


def read_metrics_csv(path) -> list[MetricsRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            opt = lambda k: float(row[k]) if row[k] != "" else None  # noqa: E731
            out.append(MetricsRecord(
                round=int(row["round"]), phase=row["phase"],
                acc_retained=opt("acc_retained"),
                acc_forgotten=opt("acc_forgotten"), bd_asr=opt("bd_asr"),
                comm_rounds_cum=int(row["comm_rounds_cum"]),
            ))
    return out
