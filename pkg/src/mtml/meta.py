"""Bi-level optimisation: one SGD adaptation step per episode, then a meta step.

The product path is first-order: query-loss gradients are taken at the
adapted parameters and applied to the original ones. ``exact_meta_gradient``
is a finite-difference oracle of the full bi-level gradient used in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .episodes import Episode
from .network import ParamSet, flatten, flatten_grads, unflatten
from .objectives import NumericError, masked_loss
from .optim import OptState, adamw_step, sgd_step
from .tasks import TaskSpec

INNER_SCOPES = ("full", "heads_only")


@dataclass
class MetaStepReport:
    inner_before: List[float] = field(default_factory=list)
    inner_after: List[float] = field(default_factory=list)
    query: List[float] = field(default_factory=list)
    grad_norm: float = 0.0

    @property
    def query_total(self) -> float:
        return float(sum(self.query))

    def rows(self) -> List[dict]:
        return [
            {"episode": i, "inner_before": b, "inner_after": a, "query": q}
            for i, (b, a, q) in enumerate(zip(self.inner_before, self.inner_after, self.query))
        ]


def _check_finite(loss: T.Tensor, what: str) -> None:
    if not np.isfinite(loss.data).all():
        raise NumericError(f"non-finite {what} loss")


def inner_adapt(
    p: ParamSet,
    ep: Episode,
    inner_lr: float,
    specs: Mapping[str, TaskSpec],
    scope: str = "full",
    report: Optional[MetaStepReport] = None,
) -> ParamSet:
    """Deep copy of ``p`` after one SGD step on the episode's support loss.

    The step touches the trunk (unless ``scope='heads_only'``) and the heads
    of the episode's tasks. Other heads and every log-variance are left as is.
    """
    if scope not in INNER_SCOPES:
        raise ValueError(f"inner scope must be one of {INNER_SCOPES}, got {scope!r}")
    missing = set(ep.combo) - set(p.heads)
    if missing:
        raise KeyError(f"episode tasks {sorted(missing)} have no head")
    q = p.copy()
    loss = masked_loss(q, ep.support, ep.combo, specs)
    _check_finite(loss, "support")
    T.backward(loss)
    if scope == "heads_only":
        q.trunk_frozen = True
    sgd_step(q, inner_lr, allow_missing=True, skip_logvars=True)
    q.trunk_frozen = p.trunk_frozen
    q.zero_grad()
    if report is not None:
        report.inner_before.append(loss.item())
        report.inner_after.append(masked_loss(q, ep.support, ep.combo, specs).item())
    return q


def query_loss(p: ParamSet, ep: Episode, specs: Mapping[str, TaskSpec]) -> T.Tensor:
    return masked_loss(p, ep.query, ep.combo, specs)


def first_order_meta_grads(
    p: ParamSet,
    episodes: Sequence[Episode],
    inner_lr: float,
    specs: Mapping[str, TaskSpec],
    scope: str = "full",
    report: Optional[MetaStepReport] = None,
) -> Dict[str, np.ndarray]:
    """Summed query-loss gradients at each episode's adapted parameters.

    Accumulation follows episode order so the result is deterministic.
    """
    acc: Dict[str, np.ndarray] = {}
    for ep in episodes:
        adapted = inner_adapt(p, ep, inner_lr, specs, scope, report)
        loss = query_loss(adapted, ep, specs)
        _check_finite(loss, "query")
        T.backward(loss)
        if report is not None:
            report.query.append(loss.item())
        for name, t in adapted.named():
            if t.grad is None:
                continue
            acc[name] = t.grad.copy() if name not in acc else acc[name] + t.grad
    return acc


def outer_step(
    p: ParamSet,
    episodes: Sequence[Episode],
    opt: OptState,
    inner_lr: float,
    specs: Mapping[str, TaskSpec],
    scope: str = "full",
) -> MetaStepReport:
    """Adapt on every episode, then one AdamW step on ``p`` from the summed query loss."""
    if not episodes:
        raise ValueError("meta batch is empty")
    report = MetaStepReport()
    grads = first_order_meta_grads(p, episodes, inner_lr, specs, scope, report)
    for name in [n for n in grads if p.is_frozen(n)]:
        del grads[name]
    report.grad_norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    # heads of tasks absent from every episode received no gradient and stay put
    adamw_step(opt, p, grads, allow_missing=True)
    return report


def exact_meta_gradient(
    p: ParamSet,
    ep: Episode,
    inner_lr: float,
    specs: Mapping[str, TaskSpec],
    h: float = 1e-4,
    scope: str = "full",
    loss_scale: float = 1.0,
) -> np.ndarray:
    """Central-difference gradient of ``query_loss(inner_adapt(theta))`` w.r.t. every flat coordinate.

    Unlike the first-order path this includes the dependence of the adapted
    parameters on the starting point.
    """
    v0 = flatten(p)

    def objective(v: np.ndarray) -> float:
        q = unflatten(p, v)
        return loss_scale * query_loss(inner_adapt(q, ep, inner_lr, specs, scope), ep, specs).item()

    return central_gradient(objective, v0, h)


def central_gradient(objective: Callable[[np.ndarray], float], v0: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of a scalar ``objective`` at ``v0``, one coordinate at a time."""
    if not (1e-5 <= h <= 1e-3):
        raise ValueError(f"step h={h} outside the supported range")
    v0 = np.asarray(v0, dtype=np.float64)
    grad = np.empty_like(v0)
    for k in range(v0.size):
        vp, vm = v0.copy(), v0.copy()
        vp[k] += h
        vm[k] -= h
        fp, fm = objective(vp), objective(vm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError("non-finite meta objective at a probe point")
        grad[k] = (fp - fm) / (2.0 * h)
    return grad


def first_order_vector(p: ParamSet, ep: Episode, inner_lr: float, specs: Mapping[str, TaskSpec], scope: str = "full") -> np.ndarray:
    """Flat first-order meta-gradient for a single episode, in canonical order."""
    grads = first_order_meta_grads(p, [ep], inner_lr, specs, scope)
    q = p.copy()
    for name, t in q.named():
        t.grad = grads.get(name)
    return flatten_grads(q)
