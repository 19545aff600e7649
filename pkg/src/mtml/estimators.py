"""scikit-learn style wrappers around the trainers.

Targets are passed as a mapping from task id to an array, e.g.
``{"T1": labels, "T3": unit_vectors}``; the single-task estimator also takes
a plain array. ``predict`` returns the same kind of mapping, ``transform``
returns the shared representation.
"""

from __future__ import annotations

from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .network import NetConfig, forward, representation
from .objectives import batch_losses
from .tasks import TASK_IDS, Batch, default_tasks
from .trainers import TrainConfig, finetune, meta_train, train_mtl, train_single


def check_targets(Y, tasks: Sequence[str], n: int, n_classes: int = 4) -> Dict[str, np.ndarray]:
    """Validate and reshape per-task targets into the layout the trainers use."""
    if not isinstance(Y, Mapping):
        raise TypeError("targets must be a mapping from task id to array")
    missing = [t for t in tasks if t not in Y]
    if missing:
        raise ValueError(f"missing targets for {missing}")
    specs = default_tasks(n_classes)
    out = {}
    for t in tasks:
        if t == "T1":
            y = check_array(Y[t], ensure_2d=False, dtype=None)
            if y.ndim != 1 or not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("T1 targets must be a 1-d array of integer labels")
            y = y.astype(np.int64)
            if y.min() < 0 or y.max() >= n_classes:
                raise ValueError(f"T1 labels must lie in [0, {n_classes})")
        else:
            width = specs[t].out_dim
            y = check_array(np.asarray(Y[t], dtype=np.float64).reshape(len(Y[t]), -1))
            if y.shape[1] != width:
                raise ValueError(f"{t} targets need {width} column(s), got {y.shape[1]}")
            if t == "T3" and not np.allclose(np.linalg.norm(y, axis=1), 1.0, atol=1e-6):
                raise ValueError("T3 targets must be unit vectors")
        if y.shape[0] != n:
            raise ValueError(f"{t}: {y.shape[0]} targets for {n} samples")
        out[t] = y
    return out


def _order(tasks) -> tuple:
    tasks = [tasks] if isinstance(tasks, str) else list(tasks)
    unknown = set(tasks) - set(TASK_IDS)
    if unknown:
        raise ValueError(f"unknown task ids {sorted(unknown)}")
    return tuple(t for t in TASK_IDS if t in tasks)


class _Base(BaseEstimator, TransformerMixin):
    def __init__(
        self,
        tasks=("T1", "T2", "T3", "T4"),
        trunk_widths=(32, 32),
        d_repr=16,
        head_widths=(16,),
        activation="tanh",
        lr=1e-3,
        batch_size=32,
        max_epochs=500,
        task_patience=35,
        global_patience=50,
        uncertainty=True,
        validation_fraction=0.2,
        random_state=0,
    ):
        self.tasks = tasks
        self.trunk_widths = trunk_widths
        self.d_repr = d_repr
        self.head_widths = head_widths
        self.activation = activation
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.task_patience = task_patience
        self.global_patience = global_patience
        self.uncertainty = uncertainty
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self, d_in: int, **extra) -> TrainConfig:
        net = NetConfig(
            d_in=d_in,
            trunk_widths=tuple(self.trunk_widths),
            d_repr=self.d_repr,
            head_widths={t: tuple(self.head_widths) for t in TASK_IDS},
            activation=self.activation,
        )
        return TrainConfig(
            net=net,
            lr=self.lr,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            task_patience=self.task_patience,
            global_patience=self.global_patience,
            uncertainty=self.uncertainty,
            **extra,
        )

    def _splits(self, X, Y, tasks, X_val=None, Y_val=None):
        X = check_array(X, dtype=np.float64)
        targets = check_targets(Y, tasks, X.shape[0])
        if X_val is None:
            if not 0.0 < self.validation_fraction < 1.0:
                raise ValueError("validation_fraction must lie in (0, 1)")
            rng = np.random.default_rng(self.random_state)
            perm = rng.permutation(X.shape[0])
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            train = Batch(X, targets).take(perm[n_val:])
            val = Batch(X, targets).take(perm[:n_val])
        else:
            X_val = check_array(X_val, dtype=np.float64)
            if X_val.shape[1] != X.shape[1]:
                raise ValueError("X_val has a different number of features")
            train = Batch(X, targets)
            val = Batch(X_val, check_targets(Y_val, tasks, X_val.shape[0]))
        # the validation split doubles as the report's held-out split
        return train, val, val

    def _record(self, report, d_in: int) -> None:
        if report.failed:
            raise FloatingPointError(f"training diverged: {report.error}")
        self.params_ = report.params
        self.report_ = report
        self.tasks_ = report.params.tasks
        self.n_features_in_ = d_in
        self.validation_scores_ = report.test

    def _check_X(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        return X

    def transform(self, X) -> np.ndarray:
        """Shared trunk representation, shape (n_samples, d_repr)."""
        return representation(self.params_, self._check_X(X)).numpy()

    def predict(self, X) -> Dict[str, np.ndarray]:
        X = self._check_X(X)
        raw = forward(self.params_, X, self.tasks_)
        out = {}
        for t, pred in raw.items():
            y = pred.numpy()
            if t == "T1":
                out[t] = np.argmax(y, axis=1)
            elif t == "T3":
                out[t] = y / np.maximum(np.linalg.norm(y, axis=1, keepdims=True), 1e-12)
            else:
                out[t] = y[:, 0]
        return out

    def score(self, X, Y) -> float:
        """Negative sum of the plain task losses over the fitted tasks (higher is better)."""
        X = self._check_X(X)
        batch = Batch(X, check_targets(Y, self.tasks_, X.shape[0]))
        losses = batch_losses(self.params_, batch, self.tasks_, default_tasks())
        return -float(sum(v.item() for v in losses.values()))


class SingleTaskNet(_Base):
    """Trunk plus one head trained on a single task."""

    def __init__(self, task="T1", **kw):
        super().__init__(tasks=(task,), **kw)
        self.task = task

    @classmethod
    def _get_param_names(cls):
        # sklearn only reads the explicit signature; fold in the shared keyword parameters
        return sorted((set(super()._get_param_names()) | set(_Base._get_param_names())) - {"tasks"})

    def fit(self, X, y, X_val=None, y_val=None):
        (task,) = _order([self.task])
        Y = y if isinstance(y, Mapping) else {task: y}
        Yv = y_val if y_val is None or isinstance(y_val, Mapping) else {task: y_val}
        splits = self._splits(X, Y, (task,), X_val, Yv)
        cfg = self._config(splits[0].x.shape[1])
        self._record(train_single(task, splits, cfg, self.random_state), splits[0].x.shape[1])
        return self

    def predict(self, X) -> np.ndarray:
        return super().predict(X)[self.tasks_[0]]

    def score(self, X, y) -> float:
        return super().score(X, y if isinstance(y, Mapping) else {self.tasks_[0]: y})


class MultiTaskNet(_Base):
    """Joint multi-task training with uncertainty-weighted losses."""

    def fit(self, X, Y, X_val=None, Y_val=None):
        tasks = _order(self.tasks)
        splits = self._splits(X, Y, tasks, X_val, Y_val)
        cfg = self._config(splits[0].x.shape[1])
        self._record(train_mtl(tasks, splits, cfg, self.random_state), splits[0].x.shape[1])
        return self


class MetaMultiTaskNet(_Base):
    """Meta-training over every multi-task combination of ``tasks``; ``add_tasks`` fine-tunes new ones."""

    def __init__(
        self,
        tasks=("T1", "T2", "T3"),
        inner_lr=0.01,
        outer_lr=1e-3,
        inner_scope="full",
        support_size=16,
        query_size=16,
        meta_batches_per_epoch=1,
        meta_max_epochs=300,
        finetune_mode="all_params",
        finetune_max_epochs=500,
        allow_two_sources=False,
        **kw,
    ):
        super().__init__(tasks=tasks, **kw)
        self.inner_lr = inner_lr
        self.outer_lr = outer_lr
        self.inner_scope = inner_scope
        self.support_size = support_size
        self.query_size = query_size
        self.meta_batches_per_epoch = meta_batches_per_epoch
        self.meta_max_epochs = meta_max_epochs
        self.finetune_mode = finetune_mode
        self.finetune_max_epochs = finetune_max_epochs
        self.allow_two_sources = allow_two_sources

    @classmethod
    def _get_param_names(cls):
        return sorted(set(super()._get_param_names()) | set(_Base._get_param_names()))

    def _meta_config(self, d_in: int) -> TrainConfig:
        return self._config(
            d_in,
            inner_lr=self.inner_lr,
            outer_lr=self.outer_lr,
            inner_scope=self.inner_scope,
            support_size=self.support_size,
            query_size=self.query_size,
            meta_batches_per_epoch=self.meta_batches_per_epoch,
            meta_max_epochs=self.meta_max_epochs,
            finetune_mode=self.finetune_mode,
            finetune_max_epochs=self.finetune_max_epochs,
            allow_two_sources=self.allow_two_sources,
        )

    def fit(self, X, Y, X_val=None, Y_val=None):
        tasks = _order(self.tasks)
        splits = self._splits(X, Y, tasks, X_val, Y_val)
        d_in = splits[0].x.shape[1]
        p, report = meta_train(tasks, splits, self._meta_config(d_in), self.random_state)
        report.params = p
        self._record(report, d_in)
        return self

    def add_tasks(self, X, Y, new_tasks, X_val=None, Y_val=None, mode: Optional[str] = None):
        """Fine-tune fresh heads for ``new_tasks`` (plus, in all_params mode, the fitted tasks)."""
        check_is_fitted(self, "params_")
        new = _order(new_tasks)
        old = self.tasks_
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, the model was fitted with {self.n_features_in_}")
        splits = self._splits(X, Y, old + new, X_val, Y_val)
        cfg = self._meta_config(self.n_features_in_)
        report = finetune(self.params_, old, new, mode or self.finetune_mode, splits, cfg, self.random_state)
        self._record(report, self.n_features_in_)
        return self
