"""Single-task, joint multi-task and meta-trained learning, plus fine-tuning.

Plain training counts one epoch per pass over the train split; meta-training
counts one meta-epoch per pass over the combination family. Both are early
stopped on validation task losses.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .episodes import generate_combos, meta_batch
from .meta import INNER_SCOPES, inner_adapt, outer_step
from .network import NetConfig, ParamSet, add_tasks, init_params
from .objectives import NumericError, evaluate, masked_loss
from .optim import OptState, adamw_step
from .tasks import TASK_IDS, Batch, TaskSpec, default_tasks, splits_digest

log = logging.getLogger(__name__)

FINETUNE_MODES = ("heads_only", "all_params")


@dataclass
class TrainConfig:
    net: NetConfig = field(default_factory=NetConfig)
    n_classes: int = 4
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-4
    max_epochs: int = 500
    task_patience: int = 35
    global_patience: int = 50
    uncertainty: bool = True
    # meta-training
    outer_lr: float = 1e-3
    inner_lr: float = 0.01
    inner_scope: str = "full"
    support_size: int = 16
    query_size: int = 16
    k_per_combo: int = 1
    meta_batches_per_epoch: int = 1
    meta_max_epochs: int = 300
    meta_val_k: int = 2
    allow_two_sources: bool = False
    # fine-tuning
    finetune_mode: str = "all_params"
    finetune_max_epochs: int = 500

    def __post_init__(self):
        if isinstance(self.net, Mapping):
            self.net = NetConfig.from_dict(self.net)
        if self.inner_scope not in INNER_SCOPES:
            raise ValueError(f"inner_scope must be one of {INNER_SCOPES}")
        if self.finetune_mode not in FINETUNE_MODES:
            raise ValueError(f"finetune_mode must be one of {FINETUNE_MODES}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.meta_max_epochs < 1:
            raise ValueError("batch_size and epoch limits must be >= 1")

    @property
    def specs(self) -> Dict[str, TaskSpec]:
        return default_tasks(self.n_classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d


class StopState:
    """Task-wise and global patience bookkeeping.

    A task stops once ``task_patience`` epochs pass without its validation
    loss improving on its best; the run stops once ``global_patience`` epochs
    pass without the summed validation loss (of ``monitor`` tasks, default
    all) improving.
    """

    def __init__(
        self,
        tasks: Iterable[str],
        task_patience: int = 35,
        global_patience: int = 50,
        monitor: Optional[Iterable[str]] = None,
    ):
        self.task_patience = task_patience
        self.global_patience = global_patience
        self.best: Dict[str, float] = {t: np.inf for t in tasks}
        self.best_epoch: Dict[str, int] = {t: 0 for t in self.best}
        self.global_best = np.inf
        self.global_best_epoch = 0
        self.stopped_tasks: Dict[str, int] = {}
        self.global_stop: Optional[int] = None
        # tasks whose summed loss drives the global stop (all tasks by default)
        self.monitor = None if monitor is None else tuple(monitor)

    def since_best(self, task: str, epoch: int) -> int:
        return epoch - self.best_epoch[task]

    def update(self, epoch: int, task_losses: Mapping[str, float], total: Optional[float] = None) -> List[str]:
        """Record one epoch of validation losses; returns tasks stopping now."""
        newly = []
        for t, v in task_losses.items():
            if t in self.stopped_tasks or t not in self.best:
                continue
            if v < self.best[t]:
                self.best[t], self.best_epoch[t] = v, epoch
            elif epoch - self.best_epoch[t] >= self.task_patience:
                self.stopped_tasks[t] = epoch
                newly.append(t)
        if total is None:
            keys = task_losses if self.monitor is None else self.monitor
            total = float(sum(task_losses[t] for t in keys))
        if total < self.global_best:
            self.global_best, self.global_best_epoch = total, epoch
        elif epoch - self.global_best_epoch >= self.global_patience:
            self.global_stop = epoch
        return newly

    @property
    def all_stopped(self) -> bool:
        return bool(self.best) and len(self.stopped_tasks) == len(self.best)

    @property
    def monitored_stopped(self) -> bool:
        watched = self.best if self.monitor is None else self.monitor
        return bool(watched) and all(t in self.stopped_tasks for t in watched)

    @property
    def done(self) -> bool:
        # once every watched task is frozen, further epochs only move the trunk under it
        return self.global_stop is not None or self.all_stopped or self.monitored_stopped

    def summary(self) -> dict:
        return {
            "task_stop_epoch": dict(self.stopped_tasks),
            "task_best_epoch": dict(self.best_epoch),
            "global_stop_epoch": self.global_stop,
            "global_best_epoch": self.global_best_epoch,
        }


@dataclass
class RunReport:
    paradigm: str
    trained_tasks: Tuple[str, ...]
    seed: int
    splits_hash: str
    finetuned_tasks: Tuple[str, ...] = ()
    epoch_unit: str = "epoch"
    history: List[dict] = field(default_factory=list)
    test: Dict[str, Dict[str, float]] = field(default_factory=dict)
    pre_finetune_test: Optional[Dict[str, Dict[str, float]]] = None
    test_evaluations: int = 0
    epochs_total: int = 0
    epochs_finetune: int = 0
    stopping: Dict[str, dict] = field(default_factory=dict)
    failed: bool = False
    error: Optional[str] = None
    params: Optional[ParamSet] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("params")
        d["trained_tasks"] = list(self.trained_tasks)
        d["finetuned_tasks"] = list(self.finetuned_tasks)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunReport":
        d = dict(d)
        d["trained_tasks"] = tuple(d["trained_tasks"])
        d["finetuned_tasks"] = tuple(d["finetuned_tasks"])
        return cls(**d)

    def val_curve(self, task: str, phase: str) -> List[float]:
        return [row["val"][task]["loss"] for row in self.history if row["phase"] == phase and task in row["val"]]

    def final_val_loss(self, task: str, phase: str = "train") -> float:
        return self.val_curve(task, phase)[-1]

    def epochs_to_reach(self, task: str, target: float, phase: str = "finetune") -> Optional[int]:
        """First epoch of ``phase`` whose validation loss for ``task`` is <= ``target``."""
        for i, v in enumerate(self.val_curve(task, phase), start=1):
            if v <= target:
                return i
        return None


def _order(tasks: Iterable[str]) -> Tuple[str, ...]:
    tasks = set(tasks)
    unknown = tasks - set(TASK_IDS)
    if unknown:
        raise KeyError(f"unknown task ids {sorted(unknown)}")
    return tuple(t for t in TASK_IDS if t in tasks)


def joint_step(p: ParamSet, batch: Batch, tasks: Sequence[str], opt: OptState, specs: Mapping[str, TaskSpec], weighted: bool = True) -> float:
    """One optimizer step on the (masked) combined loss of ``tasks``."""
    p.zero_grad()
    loss = masked_loss(p, batch, tasks, specs, weighted=weighted)
    if not np.isfinite(loss.data).all():
        raise NumericError("non-finite training loss")
    T.backward(loss)
    p.clear_frozen_grads()
    adamw_step(opt, p, allow_missing=True)
    return loss.item()


def _val_row(p: ParamSet, val: Batch, tasks, specs, phase: str, epoch: int, extra: Optional[dict] = None) -> dict:
    row = {"phase": phase, "epoch": epoch, "val": evaluate(p, val, tasks, specs, with_loss=True)}
    if extra:
        row.update(extra)
    return row


def _fit(
    p: ParamSet,
    tasks: Tuple[str, ...],
    splits: Tuple[Batch, Batch, Batch],
    cfg: TrainConfig,
    rng: np.random.Generator,
    phase: str,
    max_epochs: int,
    weighted: bool,
    history: List[dict],
    monitor: Optional[Tuple[str, ...]] = None,
) -> Tuple[int, StopState]:
    """Minibatch AdamW epochs with task-wise and global early stopping."""
    train, val, _ = splits
    specs = cfg.specs
    stop = StopState(tasks, cfg.task_patience, cfg.global_patience, monitor)
    opt = OptState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(train)
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        live = tuple(t for t in tasks if t not in p.frozen)
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            joint_step(p, train.take(perm[start : start + cfg.batch_size], live), live, opt, specs, weighted)
        row = _val_row(p, val, tasks, specs, phase, epoch)
        history.append(row)
        for t in stop.update(epoch, {t: row["val"][t]["loss"] for t in tasks}):
            p.frozen.add(t)
            log.debug("%s: task %s stopped at epoch %d", phase, t, epoch)
        if stop.done:
            break
    p.zero_grad()
    return epoch, stop


def _finish(report: RunReport, p: ParamSet, test: Batch, tasks, specs) -> RunReport:
    report.test = evaluate(p, test, tasks, specs)
    report.test_evaluations += 1
    report.params = p
    return report


def _failed(report: RunReport, exc: Exception) -> RunReport:
    log.warning("run %s seed %d failed: %s", report.paradigm, report.seed, exc)
    report.failed = True
    report.error = f"{type(exc).__name__}: {exc}"
    return report


def train_single(task: str, splits, cfg: TrainConfig, seed: int) -> RunReport:
    """Trunk plus one head trained on that task's plain loss."""
    (task,) = _order([task])
    report = RunReport("single", (task,), seed, splits_digest(splits))
    p = init_params(cfg.net, seed, [task])
    try:
        epochs, stop = _fit(p, (task,), splits, cfg, np.random.default_rng([seed, 11]), "train", cfg.max_epochs, False, report.history)
    except (NumericError, FloatingPointError) as exc:
        return _failed(report, exc)
    report.epochs_total = epochs
    report.stopping["train"] = stop.summary()
    return _finish(report, p, splits[2], (task,), cfg.specs)


def train_mtl(tasks: Iterable[str], splits, cfg: TrainConfig, seed: int, evaluate_test: bool = True) -> RunReport:
    """Joint training of trunk, listed heads and log-variances on the combined loss.

    With ``evaluate_test=False`` the test split is left untouched so a later
    fine-tune can make the run's single test evaluation.
    """
    tasks = _order(tasks)
    if len(tasks) < 2:
        raise ValueError("multi-task training needs at least two tasks")
    report = RunReport("mtl", tasks, seed, splits_digest(splits))
    p = init_params(cfg.net, seed, tasks)
    try:
        epochs, stop = _fit(p, tasks, splits, cfg, np.random.default_rng([seed, 12]), "train", cfg.max_epochs, cfg.uncertainty, report.history)
    except (NumericError, FloatingPointError) as exc:
        return _failed(report, exc)
    report.epochs_total = epochs
    report.stopping["train"] = stop.summary()
    p.frozen.clear()
    if not evaluate_test:
        report.params = p
        return report
    return _finish(report, p, splits[2], tasks, cfg.specs)


def _meta_val_proxy(p: ParamSet, episodes, cfg: TrainConfig) -> float:
    specs = cfg.specs
    total = 0.0
    for ep in episodes:
        adapted = inner_adapt(p, ep, cfg.inner_lr, specs, cfg.inner_scope)
        total += masked_loss(adapted, ep.query, ep.combo, specs, weighted=False).item()
    return total / len(episodes)


def meta_train(source_tasks: Iterable[str], splits, cfg: TrainConfig, seed: int) -> Tuple[ParamSet, RunReport]:
    """Bi-level training over every multi-task combination of ``source_tasks``."""
    tasks = _order(source_tasks)
    if len(tasks) == 2 and not cfg.allow_two_sources:
        raise ValueError("meta-training needs at least 3 source tasks (set allow_two_sources to override)")
    combos = generate_combos(tasks)
    train, val, test = splits
    specs = cfg.specs
    report = RunReport("mtml", tasks, seed, splits_digest(splits), epoch_unit="meta-epoch")
    p = init_params(cfg.net, seed, tasks)
    opt = OptState(lr=cfg.outer_lr, weight_decay=cfg.weight_decay)
    val_eps = meta_batch(combos, cfg.meta_val_k, val, cfg.support_size, cfg.query_size, seed=[seed, 7])
    stop = StopState((), cfg.task_patience, cfg.global_patience)
    epoch = 0
    try:
        for epoch in range(1, cfg.meta_max_epochs + 1):
            query = 0.0
            for j in range(cfg.meta_batches_per_epoch):
                eps = meta_batch(combos, cfg.k_per_combo, train, cfg.support_size, cfg.query_size, seed=[seed, epoch, j])
                query += outer_step(p, eps, opt, cfg.inner_lr, specs, cfg.inner_scope).query_total
            proxy = _meta_val_proxy(p, val_eps, cfg)
            report.history.append({"phase": "meta", "epoch": epoch, "val": {}, "meta_val": proxy, "meta_train_query": query})
            stop.update(epoch, {}, total=proxy)
            if stop.global_stop is not None:
                break
    except (NumericError, FloatingPointError) as exc:
        _failed(report, exc)
        return p, report
    report.epochs_total = epoch
    report.stopping["meta"] = stop.summary()
    report.params = p
    return p, report


def finetune(
    p: ParamSet,
    train_tasks: Iterable[str],
    new_tasks: Iterable[str],
    mode: str,
    splits,
    cfg: TrainConfig,
    seed: int,
    report: Optional[RunReport] = None,
) -> RunReport:
    """Meta-test / augmentation phase: fresh heads for ``new_tasks``, then training.

    ``heads_only`` trains only the new heads (trunk and old heads frozen);
    ``all_params`` trains everything on the old and new tasks together. The
    global stop watches the new tasks' validation loss when there are any.
    """
    if mode not in FINETUNE_MODES:
        raise ValueError(f"fine-tune mode must be one of {FINETUNE_MODES}")
    train_tasks, new_tasks = _order(train_tasks), _order(new_tasks)
    overlap = set(train_tasks) & set(new_tasks)
    if overlap:
        raise ValueError(f"new tasks {sorted(overlap)} were already trained")
    if report is None:
        report = RunReport("finetune", train_tasks, seed, splits_digest(splits))
    report.finetuned_tasks = new_tasks
    q = add_tasks(p, cfg.net, new_tasks, seed)
    q.frozen = set()
    q.trunk_frozen = False
    if mode == "heads_only":
        q.trunk_frozen = True
        q.frozen = set(train_tasks)
        active = new_tasks
    else:
        active = _order(train_tasks + new_tasks)
    if not active:
        raise ValueError("nothing to fine-tune")
    weighted = cfg.uncertainty and len(active) > 1
    try:
        epochs, stop = _fit(
            q, active, splits, cfg, np.random.default_rng([seed, 13]), "finetune",
            cfg.finetune_max_epochs, weighted, report.history, monitor=new_tasks or None,
        )
    except (NumericError, FloatingPointError) as exc:
        return _failed(report, exc)
    report.epochs_finetune = epochs
    report.stopping["finetune"] = stop.summary()
    q.frozen.clear()
    q.trunk_frozen = False
    return _finish(report, q, splits[2], _order(train_tasks + new_tasks), cfg.specs)
