"""Class-level federated unlearning with three distillation teachers.

Each client distils a student (initialised from the current global model)
toward three fixed references:

* the preservation teacher, a frozen copy of the original global model,
  on retained samples;
* the forgetting teacher, a freshly initialised network of the same shape,
  on forgotten samples, weighted by ``alpha``;
* the label teacher, one-hot retained labels.

The server averages the students, checks the forgetting criterion on its
public test split and repeats until it holds. Clients then drop the
forgotten samples and ordinary FedAvg can resume.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import ForgetSpec, LabeledDataset, split_forget_retain
from .errors import ConfigError, InputError
from .federation import (
    ClientState,
    ClientUpdate,
    FLConfig,
    GlobalState,
    client_rng,
    fedavg,
    minibatches,
    run_round,
)
from .metrics import Evaluator, MetricsRecord, accuracy
from .nn import ParamVector, init_params, kl_div, kl_loss_and_grad, one_hot, predict_class, predict_proba

log = logging.getLogger(__name__)

PRESERVE, FORGET, LABEL = "preserve", "forget", "label"
ALL_TEACHERS = frozenset({PRESERVE, FORGET, LABEL})


class EmptyRetainError(InputError):
    """A client holds only data that must be forgotten."""


@dataclass(frozen=True)
class UnlearnConfig:
    unlearn_lr: float = 0.07
    local_unlearn_epochs: int = 2
    batch_size: int = 32
    max_unlearn_rounds: int = 10
    alpha_override: Optional[float] = None
    forget_acc_threshold: float = 0.02
    retain_acc_drop_tolerance: float = 0.02
    forget_teacher_seed: int = 1234
    # the combined objective lists the forget term in both summands
    double_forget_term: bool = True
    teachers: frozenset = ALL_TEACHERS

    def __post_init__(self):
        object.__setattr__(self, "teachers", frozenset(self.teachers))
        if not self.unlearn_lr >= 0:
            raise ConfigError("must be non-negative", "unlearn.unlearn_lr")
        if self.local_unlearn_epochs < 0:
            raise ConfigError("must be non-negative", "unlearn.local_unlearn_epochs")
        if self.batch_size < 1:
            raise ConfigError("must be positive", "unlearn.batch_size")
        if self.max_unlearn_rounds < 1:
            raise ConfigError("must be at least 1", "unlearn.max_unlearn_rounds")
        if self.alpha_override is not None and not self.alpha_override > 0:
            raise ConfigError("must be positive", "unlearn.alpha_override")
        if not 0 <= self.forget_acc_threshold <= 1:
            raise ConfigError("must lie in [0, 1]", "unlearn.forget_acc_threshold")
        if not 0 <= self.retain_acc_drop_tolerance <= 1:
            raise ConfigError("must lie in [0, 1]", "unlearn.retain_acc_drop_tolerance")
        unknown = self.teachers - ALL_TEACHERS
        if unknown:
            raise ConfigError(f"unknown teachers {sorted(unknown)}", "unlearn.teachers")
        if FORGET not in self.teachers:
            raise ConfigError("the forgetting teacher is required", "unlearn.teachers")


@dataclass(frozen=True, eq=False)
class TeacherSet:
    preserve: ParamVector
    forget: ParamVector
    label_targets: np.ndarray
    alpha: float
    use: frozenset = ALL_TEACHERS
    forget_multiplier: int = 2

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha must be positive", "alpha")
        if self.preserve.arch != self.forget.arch:
            raise InputError("teachers must share one architecture")
        t = np.array(self.label_targets, dtype=np.float64)
        t.flags.writeable = False
        object.__setattr__(self, "label_targets", t)

    @property
    def forget_weight(self) -> float:
        return self.forget_multiplier * self.alpha


@dataclass(frozen=True)
class UnlearnDirective:
    """What the server broadcasts with an unlearning request."""

    target_classes: tuple[int, ...]
    alpha: float
    forget_teacher_seed: int
    max_rounds: int

    def to_dict(self) -> dict:
        return {
            "target_classes": list(self.target_classes),
            "alpha": self.alpha,
            "forget_teacher_seed": self.forget_teacher_seed,
            "max_rounds": self.max_rounds,
        }


@dataclass
class UnlearnOutcome:
    unlearned_global: ParamVector
    rounds_used: int
    per_round: list[MetricsRecord]
    completed: bool
    directive: UnlearnDirective
    state: GlobalState
    clients: list[ClientState] = field(default_factory=list)
    pre_acc_retained: float = float("nan")
    wall_ms: int = 0


def compute_alpha(num_retain: int, num_forget: int, cfg: UnlearnConfig | None = None) -> float:
    """Retained-to-forgotten count ratio, unless overridden."""
    if cfg is not None and cfg.alpha_override is not None:
        return float(cfg.alpha_override)
    if num_forget <= 0:
        # nothing to forget anywhere: the forget term is empty and alpha is inert
        return 1.0
    if num_retain <= 0:
        raise ConfigError("no retained data left to compute alpha")
    return num_retain / num_forget


def build_teachers(original: ParamVector, retain: LabeledDataset, forget: LabeledDataset,
                   cfg: UnlearnConfig, global_counts: tuple[int, int] | None = None) -> TeacherSet:
    """Assemble the three teachers for one client.

    ``global_counts`` is ``(num_retain, num_forget)`` summed over all
    clients; without it the local counts set alpha.
    """
    if len(retain) == 0:
        raise EmptyRetainError("client has no retained data")
    n_r, n_f = global_counts if global_counts is not None else (len(retain), len(forget))
    return TeacherSet(
        preserve=original.copy(),
        forget=init_params(original.arch, cfg.forget_teacher_seed),
        label_targets=one_hot(retain.labels, original.arch.num_classes),
        alpha=compute_alpha(n_r, n_f, cfg),
        use=cfg.teachers,
        forget_multiplier=2 if cfg.double_forget_term else 1,
    )


def _objective_batch(teachers: TeacherSet, xr, pr, lr_, xf, pf):
    """Stack the KL terms of one step into (samples, targets, weights).

    Retained samples appear once per preservation teacher with weight
    ``1/|r|``; forgotten samples carry ``forget_weight/|f|``.
    """
    xs, ts, ws = [], [], []
    if len(xr):
        wr = np.full(len(xr), 1.0 / len(xr))
        if PRESERVE in teachers.use:
            xs.append(xr); ts.append(pr); ws.append(wr)
        if LABEL in teachers.use:
            xs.append(xr); ts.append(lr_); ws.append(wr)
    if len(xf):
        xs.append(xf); ts.append(pf); ws.append(np.full(len(xf), teachers.forget_weight / len(xf)))
    return np.concatenate(xs), np.concatenate(ts), np.concatenate(ws)


def _teacher_targets(teachers: TeacherSet, retain: LabeledDataset, forget: LabeledDataset):
    K = teachers.preserve.arch.num_classes
    pr = predict_proba(teachers.preserve, retain.samples) if len(retain) else np.zeros((0, K))
    pf = predict_proba(teachers.forget, forget.samples) if len(forget) else np.zeros((0, K))
    return pr, teachers.label_targets, pf


def unlearn_objective(student: ParamVector, teachers: TeacherSet, retain: LabeledDataset,
                      forget: LabeledDataset) -> float:
    """Mean preservation KL over retained data plus weighted mean forgetting KL."""
    pr, lt, pf = _teacher_targets(teachers, retain, forget)
    total = 0.0
    if len(retain):
        s = predict_proba(student, retain.samples)
        if PRESERVE in teachers.use:
            total += float(np.mean(kl_div(pr, s)))
        if LABEL in teachers.use:
            total += float(np.mean(kl_div(lt, s)))
    if len(forget):
        s = predict_proba(student, forget.samples)
        total += teachers.forget_weight * float(np.mean(kl_div(pf, s)))
    return total


def unlearn_objective_grad(student: ParamVector, teachers: TeacherSet, retain: LabeledDataset,
                           forget: LabeledDataset) -> ParamVector:
    pr, lt, pf = _teacher_targets(teachers, retain, forget)
    x, t, w = _objective_batch(teachers, retain.samples, pr, lt, forget.samples, pf)
    _, g = kl_loss_and_grad(student, x, t, w)
    return ParamVector(student.arch, g)


def client_unlearn_round(client: ClientState, teachers: TeacherSet, cfg: UnlearnConfig,
                         rng: np.random.Generator, spec: ForgetSpec | None = None,
                         start: ParamVector | None = None,
                         split: tuple[LabeledDataset, LabeledDataset] | None = None) -> ParamVector:
    """Local distillation passes on the client's own data.

    One epoch walks the retained set in mini-batches; each step is paired
    with the next mini-batch of forgotten samples, cycling through them.
    """
    if start is None:
        start = client.local_model if client.local_model is not None else teachers.preserve
    if split is not None:
        forget, retain = split
    elif spec is None:
        # without a spec every sample is treated as retained
        forget, retain = client.train_shard.subset([]), client.train_shard
    else:
        forget, retain = split_forget_retain(client.train_shard, spec)
    if len(retain) == 0:
        raise EmptyRetainError(f"client {client.id} has no retained data")
    if teachers.label_targets.shape[0] != len(retain):
        raise InputError("label teacher does not match the client's retained data")
    if cfg.local_unlearn_epochs == 0 or cfg.unlearn_lr == 0:
        return start

    pr, lt, pf = _teacher_targets(teachers, retain, forget)
    arch = start.arch
    values = np.array(start.values)
    f_order = rng.permutation(len(forget)) if len(forget) else np.zeros(0, dtype=np.int64)
    f_pos = 0
    fb = min(cfg.batch_size, len(forget))
    for _ in range(cfg.local_unlearn_epochs):
        for ridx in minibatches(len(retain), cfg.batch_size, rng):
            if fb:
                if f_pos + fb > len(f_order):
                    f_order = rng.permutation(len(forget))
                    f_pos = 0
                fidx = f_order[f_pos:f_pos + fb]
                f_pos += fb
            else:
                fidx = f_order[:0]
            x, t, w = _objective_batch(
                teachers, retain.samples[ridx], pr[ridx], lt[ridx], forget.samples[fidx], pf[fidx]
            )
            _, g = kl_loss_and_grad(ParamVector(arch, values), x, t, w)
            values -= cfg.unlearn_lr * g
    return ParamVector(arch, values)


def forgetting_criterion(model: ParamVector, eval_forget: LabeledDataset, eval_retain: LabeledDataset,
                         pre_unlearn_retain_acc: float, cfg: UnlearnConfig) -> bool:
    """Forgotten accuracy at or under threshold and retained accuracy within tolerance.

    With several forgotten classes the worst single class is what counts.
    """
    pred = predict_class(model, eval_forget.samples)
    hit = pred == eval_forget.labels
    worst = max(float(np.mean(hit[eval_forget.labels == c])) for c in np.unique(eval_forget.labels))
    return criterion_from_scores(worst, accuracy(model, eval_retain), pre_unlearn_retain_acc, cfg)


def criterion_from_scores(acc_forgotten: float, acc_retained: float, pre_retain: float,
                          cfg: UnlearnConfig) -> bool:
    # small slack so that "within 2 points" is not lost to float rounding
    eps = 1e-12
    return (acc_forgotten <= cfg.forget_acc_threshold + eps
            and acc_retained >= pre_retain - cfg.retain_acc_drop_tolerance - eps)


def make_directive(clients: Sequence[ClientState], spec: ForgetSpec, cfg: UnlearnConfig) -> UnlearnDirective:
    # clients report only two integers each
    counts = [_local_counts(c, spec) for c in clients]
    n_r = sum(r for r, _ in counts)
    n_f = sum(f for _, f in counts)
    return UnlearnDirective(
        target_classes=tuple(sorted(spec.target_classes)),
        alpha=compute_alpha(n_r, n_f, cfg),
        forget_teacher_seed=cfg.forget_teacher_seed,
        max_rounds=cfg.max_unlearn_rounds,
    )


def _local_counts(client: ClientState, spec: ForgetSpec) -> tuple[int, int]:
    n_f = int(spec.mask(client.train_shard.origin_labels).sum())
    return len(client.train_shard) - n_f, n_f


def run_sfu(
    original: ParamVector,
    clients: Sequence[ClientState],
    spec: ForgetSpec,
    cfg: UnlearnConfig,
    flcfg: FLConfig,
    evaluator: Evaluator,
    start: GlobalState | None = None,
    max_workers: int = 1,
    early_stop: bool = True,
) -> UnlearnOutcome:
    """Run unlearning rounds with every client until the criterion holds.

    ``evaluator`` is the server's own test split; its forget spec decides
    which classes count as forgotten for the criterion. ``start`` carries the
    round counter of the training run that is being interrupted. With
    ``early_stop=False`` every round of the budget runs (used to record
    full curves); ``completed`` then reports the final round.
    """
    if evaluator.forget_test is None or len(evaluator.forget_test) == 0:
        raise ConfigError("evaluator needs forgotten-class test samples", "evaluator")
    if start is None:
        start = GlobalState(0, original, 0, flcfg.seed)
    directive = make_directive(clients, spec, cfg)
    alpha = directive.alpha
    log.info("unlearning directive %s", directive.to_dict())

    t0 = time.perf_counter_ns()
    teacher_cfg = replace(cfg, alpha_override=alpha)
    participants = []
    teachers = {}
    splits = {}
    for c in clients:
        forget, retain = splits[c.id] = split_forget_retain(c.train_shard, spec)
        try:
            teachers[c.id] = build_teachers(original, retain, forget, teacher_cfg)
        except EmptyRetainError:
            log.warning("client %d holds only forgotten data; excluded from unlearning", c.id)
            continue
        participants.append(c)
    if not participants:
        raise ConfigError("no client has retained data")

    pre_retain = accuracy(original, evaluator.retain_test)
    model = original
    state = start
    records: list[MetricsRecord] = []
    completed = False
    setup_ns = time.perf_counter_ns() - t0
    for k in range(1, cfg.max_unlearn_rounds + 1):
        t1 = time.perf_counter_ns()
        round_ = state.round + 1
        current = model

        def work(c: ClientState) -> ClientUpdate:
            params = client_unlearn_round(
                c, teachers[c.id], cfg, client_rng(flcfg.seed, round_, c.id, stream=1),
                start=current, split=splits[c.id],
            )
            c.local_model = params
            # aggregation weight is the full local count num(x_i)
            return ClientUpdate(c.id, params, len(c.train_shard))

        model = fedavg(run_round(work, participants, max_workers))
        state = GlobalState(round_, model, state.comm_rounds + 1, state.rng_state)
        scores = evaluator(model)
        completed = criterion_from_scores(scores["acc_forgotten_worst"], scores["acc_retained"], pre_retain, cfg)
        elapsed = time.perf_counter_ns() - t1 + (setup_ns if k == 1 else 0)
        records.append(MetricsRecord(
            round=round_, phase="unlearn",
            acc_retained=scores["acc_retained"], acc_forgotten=scores["acc_forgotten"],
            bd_asr=scores["bd_asr"], elapsed_ms=round(elapsed / 1e6),
            comm_rounds_cum=state.comm_rounds,
        ))
        if completed and early_stop:
            break
    wall_ns = time.perf_counter_ns() - t0
    if not completed:
        log.warning("forgetting criterion unmet after %d rounds", cfg.max_unlearn_rounds)

    # clients drop x^f and keep x^r
    remaining = [replace(c, train_shard=splits[c.id][1], local_model=model) for c in clients]
    return UnlearnOutcome(
        unlearned_global=model,
        rounds_used=len(records),
        per_round=records,
        completed=completed,
        directive=directive,
        state=state,
        clients=remaining,
        pre_acc_retained=pre_retain,
        wall_ms=round(wall_ns / 1e6),
    )


def run_multi_class_sfu(
    original: ParamVector,
    clients: Sequence[ClientState],
    specs: Sequence[ForgetSpec],
    cfg: UnlearnConfig,
    flcfg: FLConfig,
    test: LabeledDataset,
    backdoor=None,
    start: GlobalState | None = None,
    max_workers: int = 1,
) -> list[UnlearnOutcome]:
    """Forget each class set in turn, carrying model and shrunken data forward."""
    seen: set[int] = set()
    for s in specs:
        if seen & s.target_classes:
            raise ConfigError("forget specs must be disjoint", "specs")
        seen |= s.target_classes
    outcomes = []
    model, current = original, list(clients)
    state = start
    forgotten: set[int] = set()
    for s in specs:
        forgotten |= s.target_classes
        evaluator = Evaluator(test, ForgetSpec(frozenset(forgotten), s.num_classes), backdoor)
        out = run_sfu(model, current, s, cfg, flcfg, evaluator, start=state, max_workers=max_workers)
        outcomes.append(out)
        model, current, state = out.unlearned_global, out.clients, out.state
    return outcomes
