"""Experiment flows and the artifacts they leave in ``output_dir``.

Every run directory gets:

* ``config.yaml``: the resolved configuration, written before anything runs;
* ``metrics_<run>.csv`` / ``timing_<run>.csv`` per run (wall time is kept
  out of the metrics file so identical configs give identical bytes);
* ``plot_data.csv``: long format ``run_label, round, metric_name, value``;
* ``summary.json``: per-method rounds, wall time, final accuracies, ASR and
  the pass/fail state of every configured threshold;
* ``directive.json`` for flows that unlearn;
* ``ERROR`` holding the traceback if the flow raised.
"""

from __future__ import annotations

import csv
import json
import logging
import traceback
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Sequence

from .config import ExperimentConfig, dump_config
from .data import ForgetSpec
from .evaluation import RETRAIN, ablation_suite, alpha_sweep, efficiency_report
from .federation import GlobalState, run_fl
from .metrics import Evaluator, MetricsRecord, write_metrics_csv
from .scenario import World, build_world, pretrain, retrain
from .unlearning import UnlearnOutcome, run_multi_class_sfu, run_sfu

log = logging.getLogger(__name__)

PLOT_COLUMNS = ("run_label", "round", "metric_name", "value")
PLOT_METRICS = ("acc_retained", "acc_forgotten", "bd_asr")

EXIT_OK, EXIT_THRESHOLD, EXIT_ERROR = 0, 1, 2


class ArtifactSink:
    """Writes each run as soon as it finishes so a later failure keeps it."""

    def __init__(self, out: Path):
        self.out = out
        self.plot_rows: list[tuple] = []

    def add_run(self, label: str, records: Sequence[MetricsRecord]) -> None:
        write_metrics_csv(records, self.out / f"metrics_{label}.csv", self.out / f"timing_{label}.csv")
        for r in records:
            for m in PLOT_METRICS:
                v = getattr(r, m)
                if v is not None:
                    self.plot_rows.append((label, r.round, m, f"{v:.6f}"))
        self.write_plot()

    def write_plot(self) -> None:
        with open(self.out / "plot_data.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLOT_COLUMNS)
            w.writerows(self.plot_rows)

    def write_json(self, name: str, payload) -> None:
        (self.out / name).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _final(records: Sequence[MetricsRecord]) -> dict:
    if not records:
        return {"acc_retained": None, "acc_forgotten": None, "bd_asr": None}
    r = records[-1]
    return {"acc_retained": r.acc_retained, "acc_forgotten": r.acc_forgotten, "bd_asr": r.bd_asr}


def _wall(records: Sequence[MetricsRecord]) -> int:
    return sum(r.elapsed_ms for r in records)


def _resume(world: World, outcome: UnlearnOutcome) -> tuple[GlobalState, list[MetricsRecord]]:
    fl = replace(world.fl, max_rounds=world.cfg["fl"]["resume_rounds"])
    return run_fl(outcome.state, outcome.clients, fl, evaluate=world.evaluator(),
                  phase="resume", max_workers=world.max_workers)


def _sfu(world: World, state: GlobalState) -> UnlearnOutcome:
    return run_sfu(state.global_model, world.clients(), world.spec, world.unlearn, world.fl,
                   world.evaluator(), start=state, max_workers=world.max_workers)


def _outcome_summary(o: UnlearnOutcome) -> dict:
    last = o.per_round[-1]
    return {
        "rounds_used": o.rounds_used,
        "completed": o.completed,
        "wall_ms": o.wall_ms,
        "acc_retained_before": o.pre_acc_retained,
        "acc_retained_after": last.acc_retained,
        "acc_forgotten_after": last.acc_forgotten,
        "bd_asr_after": last.bd_asr,
    }


# each flow returns (summary, checks); checks maps a threshold name to pass/fail

def flow_train(cfg: ExperimentConfig, sink: ArtifactSink):
    world = build_world(cfg)
    state, records = pretrain(world, Evaluator(world.test))
    sink.add_run("train", records)
    summary = {"method": "fedavg", "rounds": state.round, "wall_ms": _wall(records), **_final(records)}
    return summary, {}


def flow_retrain(cfg: ExperimentConfig, sink: ArtifactSink):
    world = build_world(cfg)
    state, records = retrain(world)
    sink.add_run(RETRAIN, records)
    target = cfg["fl"]["retrain_target_acc"]
    reached = bool(records) and records[-1].acc_retained >= target
    summary = {"method": RETRAIN, "rounds_to_done": state.round, "wall_ms": _wall(records),
               "target_acc": target, **_final(records)}
    return summary, {"retrain_reached_target": reached}


def flow_unlearn(cfg: ExperimentConfig, sink: ArtifactSink):
    world = build_world(cfg)
    state, train_records = pretrain(world, world.evaluator())
    outcome = _sfu(world, state)
    sink.write_json("directive.json", outcome.directive.to_dict())
    _, resume_records = _resume(world, outcome)
    sink.add_run("sfu", train_records + outcome.per_round + resume_records)
    _, rt_records = retrain(world)
    sink.add_run(RETRAIN, rt_records)

    report = efficiency_report([("sfu", outcome.per_round), (RETRAIN, rt_records)])
    sfu_row = next(r for r in report if r.method == "sfu")
    u = cfg["unlearn"]
    target = cfg["fl"]["retrain_target_acc"]
    checks = {
        "forgetting_criterion": outcome.completed,
        "rounds_used_within_target": outcome.rounds_used <= u["max_rounds_target"],
        "retrain_reached_target": bool(rt_records) and rt_records[-1].acc_retained >= target,
        "rounds_speedup_at_least_min": sfu_row.rounds_ratio_vs_retrain >= u["min_rounds_speedup"],
    }
    summary = {
        "sfu": _outcome_summary(outcome),
        "resume": {"rounds": len(resume_records), **_final(resume_records)},
        RETRAIN: {"rounds_to_done": len(rt_records), "wall_ms": _wall(rt_records), **_final(rt_records)},
        "efficiency": [asdict(r) for r in report],
    }
    return summary, checks


def flow_backdoor(cfg: ExperimentConfig, sink: ArtifactSink):
    world = build_world(cfg)
    ev = world.evaluator()
    state, train_records = pretrain(world, ev)
    asr_before = ev(state.global_model)["bd_asr"]
    outcome = _sfu(world, state)
    sink.write_json("directive.json", outcome.directive.to_dict())
    sink.add_run("sfu", train_records + outcome.per_round)
    rt_state, rt_records = retrain(world)
    sink.add_run(RETRAIN, rt_records)
    asr_after = outcome.per_round[-1].bd_asr
    asr_retrain = ev(rt_state.global_model)["bd_asr"]
    b = cfg["backdoor"]
    checks = {
        "asr_before_at_least_min": asr_before >= b["min_asr_before"],
        "asr_after_sfu_at_most_max": asr_after <= b["max_asr_after"],
        "asr_after_retrain_at_most_max": asr_retrain <= b["max_asr_after"],
        "forgetting_criterion": outcome.completed,
    }
    summary = {
        "bd_asr_before": asr_before,
        "bd_asr_after_sfu": asr_after,
        "bd_asr_after_retrain": asr_retrain,
        "sfu": _outcome_summary(outcome),
        RETRAIN: {"rounds_to_done": len(rt_records), "wall_ms": _wall(rt_records), **_final(rt_records)},
    }
    return summary, checks


def flow_ablation(cfg: ExperimentConfig, sink: ArtifactSink):
    world = build_world(cfg)
    state, train_records = pretrain(world, world.evaluator())
    sink.add_run("train", train_records)
    result = ablation_suite(world, state, cfg["unlearn"]["ablation_combos"])
    for label, o in result.runs.items():
        sink.add_run(f"ablation_{label}", o.per_round)
    summary = {
        "combos": {k: {"reached_threshold": result.reached_threshold[k],
                       "final_acc_retained": o.per_round[-1].acc_retained,
                       "final_acc_forgotten": o.per_round[-1].acc_forgotten}
                   for k, o in result.runs.items()},
        "comparison_round": result.comparison_rounds,
        "full_minus_ablation_retained": result.retained_gap,
    }
    return summary, {"all_combos_forget": result.all_forget, "full_retains_best": result.full_dominates}


def flow_alpha_sweep(cfg: ExperimentConfig, sink: ArtifactSink):
    world = build_world(cfg)
    state, train_records = pretrain(world, world.evaluator())
    sink.add_run("train", train_records)
    result = alpha_sweep(world, state, cfg["unlearn"]["alphas"])
    for a, o in zip(result.alphas, result.runs):
        sink.add_run(f"alpha_{a:g}", o.per_round)
    summary = {
        "alphas": result.alphas,
        "acc_forgotten": result.final("acc_forgotten"),
        "acc_retained": result.final("acc_retained"),
    }
    return summary, {"nonincreasing_in_alpha": result.monotone}


def flow_multi_class(cfg: ExperimentConfig, sink: ArtifactSink):
    specs = cfg.multi_class_specs()
    union = ForgetSpec(frozenset().union(*(s.target_classes for s in specs)), specs[0].num_classes)
    world = build_world(cfg, union)
    ev = world.evaluator(with_backdoor=False)
    state, train_records = pretrain(world, ev)
    outcomes = run_multi_class_sfu(state.global_model, world.clients(), specs, world.unlearn, world.fl,
                                   world.test, start=state, max_workers=world.max_workers)
    sink.write_json("directive.json", [o.directive.to_dict() for o in outcomes])
    last = outcomes[-1]
    _, resume_records = _resume(world, last)
    sink.add_run("sfu", train_records + [r for o in outcomes for r in o.per_round] + resume_records)

    before, after = ev(state.global_model), ev(last.unlearned_global)
    u = world.unlearn
    checks = {
        "every_step_completed": all(o.completed for o in outcomes),
        "rounds_used_within_target": all(o.rounds_used <= cfg["unlearn"]["max_rounds_target"] for o in outcomes),
        "worst_forgotten_class_at_most_threshold": after["acc_forgotten_worst"] <= u.forget_acc_threshold,
        "retained_within_tolerance":
            after["acc_retained"] >= before["acc_retained"] - u.retain_acc_drop_tolerance - 1e-12,
    }
    summary = {
        "steps": [{"target_classes": list(o.directive.target_classes), **_outcome_summary(o)} for o in outcomes],
        "acc_retained_before": before["acc_retained"],
        "acc_retained_after": after["acc_retained"],
        "acc_forgotten_worst_after": after["acc_forgotten_worst"],
    }
    return summary, checks


FLOWS: dict[str, Callable] = {
    "train": flow_train,
    "retrain": flow_retrain,
    "unlearn": flow_unlearn,
    "backdoor-eval": flow_backdoor,
    "ablation": flow_ablation,
    "alpha-sweep": flow_alpha_sweep,
    "multi-class": flow_multi_class,
}


def run_experiment(cfg: ExperimentConfig) -> int:
    """Run the configured flow; 0 iff every threshold held, 1 if one failed, 2 on error."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    marker = out / "ERROR"
    if marker.exists():
        marker.unlink()
    dump_config(cfg, out / "config.yaml")
    sink = ArtifactSink(out)
    try:
        summary, checks = FLOWS[cfg.experiment](cfg, sink)
    except Exception:
        marker.write_text(traceback.format_exc(), encoding="utf-8")
        log.exception("experiment %s failed", cfg.experiment)
        return EXIT_ERROR
    passed = all(checks.values())
    sink.write_json("summary.json", {"experiment": cfg.experiment, "passed": passed,
                                     "checks": checks, **summary})
    for name, ok in checks.items():
        log.info("%-40s %s", name, "pass" if ok else "FAIL")
    return EXIT_OK if passed else EXIT_THRESHOLD
