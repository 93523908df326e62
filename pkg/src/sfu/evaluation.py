"""Experiment-level comparisons: efficiency against retraining, teacher ablations, alpha sweeps."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .errors import ConfigError, MetricError
from .federation import GlobalState
from .metrics import MetricsRecord, accuracy, bd_asr  # noqa: F401  (re-exported)
from .scenario import World
from .unlearning import ALL_TEACHERS, FORGET, LABEL, PRESERVE, UnlearnOutcome, make_directive, run_sfu

RETRAIN = "retrain"


@dataclass(frozen=True)
class ComparisonReport:
    method: str
    rounds_to_done: int
    wall_ms: int
    speedup_vs_retrain: float
    rounds_ratio_vs_retrain: float


def efficiency_report(runs: Sequence[tuple[str, Sequence[MetricsRecord]]]) -> list[ComparisonReport]:
    """Rounds and wall time per method, normalised to the single ``retrain`` run.

    ``rounds_to_done`` is the number of records given for a method, so pass
    only the rounds that count toward completion (the unlearning rounds for
    an unlearning method, the rounds up to the stopping rule for retraining).
    Wall times under the 1 ms clock resolution count as 1 ms.
    """
    labels = [label for label, _ in runs]
    if labels.count(RETRAIN) != 1:
        raise ConfigError(f"need exactly one {RETRAIN!r} run, got {labels.count(RETRAIN)}", "runs")
    totals = {}
    for label, records in runs:
        records = list(records)
        if not records:
            raise MetricError(f"run {label!r} has no rounds")
        totals[label] = (len(records), max(1, sum(r.elapsed_ms for r in records)))
    base_rounds, base_wall = totals[RETRAIN]
    rows = [
        ComparisonReport(label, n, wall, base_wall / wall, base_rounds / n)
        for label, (n, wall) in totals.items()
    ]
    return sorted(rows, key=lambda r: -r.speedup_vs_retrain)


def _label(combo: Iterable[str]) -> str:
    order = (PRESERVE, FORGET, LABEL)
    return "+".join(t for t in order if t in set(combo))


@dataclass
class AblationResult:
    runs: dict[str, UnlearnOutcome]
    full: str
    comparison_rounds: dict[str, int]
    retained_gap: dict[str, float]
    reached_threshold: dict[str, bool]

    @property
    def full_dominates(self) -> bool:
        return all(g >= 0 for g in self.retained_gap.values())

    @property
    def all_forget(self) -> bool:
        return all(self.reached_threshold.values())


def ablation_suite(world: World, state: GlobalState, combos: Iterable[Iterable[str]],
                   rounds: int | None = None) -> AblationResult:
    """Unlearn with each teacher combination for a fixed number of rounds.

    Each partial combination is compared with the full one at the first
    round where it meets the forget threshold, or at its last round.
    """
    combos = [frozenset(c) for c in combos]
    for c in combos:
        if FORGET not in c:
            raise ConfigError(f"combination {sorted(c)} lacks the forgetting teacher", "unlearn.ablation_combos")
        if c - ALL_TEACHERS:
            raise ConfigError(f"unknown teachers {sorted(c - ALL_TEACHERS)}", "unlearn.ablation_combos")
    if ALL_TEACHERS not in combos:
        combos.append(ALL_TEACHERS)
    rounds = rounds or world.cfg["unlearn"]["ablation_rounds"]
    evaluator = world.evaluator(with_backdoor=False)
    thr = world.unlearn.forget_acc_threshold
    runs = {}
    for c in combos:
        ucfg = replace(world.unlearn, teachers=c, max_unlearn_rounds=rounds)
        runs[_label(c)] = run_sfu(state.global_model, world.clients(), world.spec, ucfg, world.fl,
                                  evaluator, start=state, max_workers=world.max_workers, early_stop=False)
    full = _label(ALL_TEACHERS)
    reached = {k: any(r.acc_forgotten <= thr for r in o.per_round) for k, o in runs.items()}
    comparison, gap = {}, {}
    for k, o in runs.items():
        if k == full:
            continue
        idx = next((i for i, r in enumerate(o.per_round) if r.acc_forgotten <= thr), len(o.per_round) - 1)
        comparison[k] = idx + 1
        gap[k] = runs[full].per_round[idx].acc_retained - o.per_round[idx].acc_retained
    return AblationResult(runs, full, comparison, gap, reached)


@dataclass
class SweepResult:
    alphas: list[float]
    runs: list[UnlearnOutcome]

    def final(self, metric: str) -> list[float]:
        return [getattr(o.per_round[-1], metric) for o in self.runs]

    @property
    def monotone(self) -> bool:
        """Forgotten and retained accuracy both nonincreasing as alpha grows."""
        f, r = self.final("acc_forgotten"), self.final("acc_retained")
        return all(a >= b for a, b in zip(f, f[1:])) and all(a >= b for a, b in zip(r, r[1:]))


def default_alphas(world: World) -> list[float]:
    a = make_directive(world.clients(), world.spec, replace(world.unlearn, alpha_override=None)).alpha
    return [1.0, a, 10.0 * a]


def alpha_sweep(world: World, state: GlobalState, alphas: Sequence[float] | None = None,
                rounds: int | None = None) -> SweepResult:
    """Unlearn for a fixed number of rounds at each alpha (ascending)."""
    alphas = sorted(default_alphas(world) if alphas is None else [float(a) for a in alphas])
    if len(alphas) < 2:
        raise ConfigError("need at least two alphas", "unlearn.alphas")
    rounds = rounds or world.cfg["unlearn"]["sweep_rounds"]
    evaluator = world.evaluator(with_backdoor=False)
    runs = []
    for a in alphas:
        ucfg = replace(world.unlearn, alpha_override=a, max_unlearn_rounds=rounds)
        runs.append(run_sfu(state.global_model, world.clients(), world.spec, ucfg, world.fl, evaluator,
                            start=state, max_workers=world.max_workers, early_stop=False))
    return SweepResult(alphas, runs)
