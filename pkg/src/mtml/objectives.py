"""Task losses, the uncertainty-weighted masked combination, and metrics."""

from __future__ import annotations

from typing import Dict, Iterable, Mapping

import numpy as np

from . import tensor as T
from .network import ParamSet, forward
from .tasks import CLASSIFICATION, ROBUST, SCALAR, UNITVEC, TaskSpec, TASK_IDS
from .tensor import Tensor

HUBER_DELTA = 1.0

# larger is better for these; everything else is an error
HIGHER_IS_BETTER = frozenset({"accuracy", "cosine_sim", "pct_within_11_25", "pct_within_22_5", "pct_within_30"})


class NumericError(FloatingPointError):
    """A loss evaluated to a non-finite value."""


def _one_hot(labels: np.ndarray, C: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], C))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _row_normalize(pred: Tensor) -> Tensor:
    sq = T.reduce_sum(T.mul(pred, pred), axis=1, keepdims=True)
    norm = T.sqrt(T.shift(sq, 1e-12))
    return T.div(pred, T.broadcast_to(norm, pred.shape))


def task_loss(task: TaskSpec, pred: Tensor, target) -> Tensor:
    target = np.asarray(target)
    B = pred.shape[0]
    if pred.data.ndim != 2 or pred.shape[1] != task.out_dim:
        raise T.DimensionError(f"{task.id}: prediction shape {pred.shape} does not match out_dim {task.out_dim}")
    if target.shape[0] != B:
        raise T.DimensionError(f"{task.id}: {B} predictions but {target.shape[0]} targets")
    if task.kind == CLASSIFICATION:
        picked = T.reduce_sum(T.mul(pred, Tensor(_one_hot(target.astype(np.int64), task.out_dim))), axis=1)
        loss = T.reduce_mean(T.sub(T.logsumexp(pred, axis=1), picked))
    elif task.kind == SCALAR:
        r = T.sub(pred, Tensor(target.reshape(B, 1)))
        loss = T.reduce_mean(T.mul(r, r))
    elif task.kind == UNITVEC:
        cos = T.reduce_sum(T.mul(_row_normalize(pred), Tensor(target.reshape(B, 3))), axis=1)
        loss = T.reduce_mean(T.sub(Tensor(np.ones(B)), cos))
    elif task.kind == ROBUST:
        loss = T.reduce_mean(T.huber(T.sub(pred, Tensor(target.reshape(B, 1))), HUBER_DELTA))
    else:
        raise ValueError(f"unknown task kind {task.kind!r}")
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite loss for task {task.id}")
    return loss


def combined_loss(losses: Mapping[str, Tensor], logvars: Mapping[str, Tensor], mask: Iterable[str]) -> Tensor:
    """Sum over included tasks of ``exp(-s) * L + s / 2``.

    Excluded tasks never enter the graph, so their heads get no gradient.
    """
    included = [t for t in TASK_IDS if t in set(mask)]
    if not included:
        raise ValueError("task mask must include at least one task")
    missing = [t for t in included if t not in losses]
    if missing:
        raise KeyError(f"no loss for included tasks {missing}")
    total = None
    for t in included:
        s = logvars[t]
        term = T.add(T.mul(T.exp(T.scale(s, -1.0)), losses[t]), T.scale(s, 0.5))
        total = term if total is None else T.add(total, term)
    return total


def batch_losses(p: ParamSet, batch, tasks: Iterable[str], specs: Mapping[str, TaskSpec]) -> Dict[str, Tensor]:
    tasks = tuple(tasks)
    preds = forward(p, batch.x, tasks)
    return {t: task_loss(specs[t], preds[t], batch.targets[t]) for t in tasks}


def masked_loss(p: ParamSet, batch, tasks: Iterable[str], specs: Mapping[str, TaskSpec], weighted: bool = True) -> Tensor:
    losses = batch_losses(p, batch, tasks, specs)
    if weighted:
        return combined_loss(losses, p.logvars, tasks)
    total = None
    for t in losses:
        total = losses[t] if total is None else T.add(total, losses[t])
    return total


# ---------------------------------------------------------------------------
# metrics


def angular_errors_deg(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    pn = pred / np.maximum(np.linalg.norm(pred, axis=1, keepdims=True), 1e-12)
    tn = target / np.maximum(np.linalg.norm(target, axis=1, keepdims=True), 1e-12)
    dots = np.clip(np.sum(pn * tn, axis=1), -1.0, 1.0)
    return np.degrees(np.arccos(dots))


def metrics_for(task: TaskSpec, pred: np.ndarray, target: np.ndarray) -> Dict[str, float]:
    target = np.asarray(target)
    if task.kind == CLASSIFICATION:
        return {"accuracy": float(np.mean(np.argmax(pred, axis=1) == target))}
    if task.kind in (SCALAR, ROBUST):
        return {"mae": float(np.mean(np.abs(pred.reshape(-1) - target.reshape(-1))))}
    if task.kind == UNITVEC:
        ang = angular_errors_deg(pred, target)
        return {
            "cosine_sim": float(np.mean(np.cos(np.radians(ang)))),
            "angular_mean_deg": float(np.mean(ang)),
            "angular_median_deg": float(np.median(ang)),
            "pct_within_11_25": float(100.0 * np.mean(ang <= 11.25)),
            "pct_within_22_5": float(100.0 * np.mean(ang <= 22.5)),
            "pct_within_30": float(100.0 * np.mean(ang <= 30.0)),
        }
    raise ValueError(f"unknown task kind {task.kind!r}")


def evaluate(p: ParamSet, batch, tasks: Iterable[str], specs: Mapping[str, TaskSpec], with_loss: bool = False) -> Dict[str, Dict[str, float]]:
    """Per-task metric report computed from ``forward`` predictions."""
    tasks = tuple(tasks)
    preds = forward(p, batch.x, tasks)
    report = {}
    for t in tasks:
        m = metrics_for(specs[t], preds[t].data, batch.targets[t])
        if with_loss:
            m["loss"] = float(task_loss(specs[t], preds[t].detach(), batch.targets[t]).item())
        report[t] = m
    return report


def relative_gap(metric: str, value: float, reference: float) -> float:
    """Signed relative shortfall of ``value`` vs ``reference``; positive means worse."""
    denom = abs(reference) if reference != 0 else 1.0
    if metric in HIGHER_IS_BETTER:
        return (reference - value) / denom
    return (value - reference) / denom


def flat_record(report: Mapping[str, Mapping[str, float]], **keys) -> Dict[str, float]:
    """One flat record per (experiment, seed, epoch, split)."""
    row = dict(keys)
    for t, metrics in report.items():
        for m, v in metrics.items():
            row[f"{t}.{m}"] = v
    return row
