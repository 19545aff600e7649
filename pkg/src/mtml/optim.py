"""Plain SGD and AdamW over a ParamSet, honouring frozen groups."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .network import ParamSet


class MissingGradError(RuntimeError):
    """An unfrozen parameter has no gradient."""


def _grad_of(name: str, tensor, grads: Optional[Mapping[str, np.ndarray]], allow_missing: bool) -> Optional[np.ndarray]:
    g = tensor.grad if grads is None else grads.get(name)
    if g is None and not allow_missing:
        raise MissingGradError(f"no gradient for unfrozen parameter {name}")
    return g


def sgd_step(p: ParamSet, lr: float, grads: Optional[Mapping[str, np.ndarray]] = None, allow_missing: bool = False, skip_logvars: bool = False) -> None:
    """In place ``p <- p - lr * g`` on every unfrozen parameter."""
    for name, t in p.named():
        if p.is_frozen(name) or (skip_logvars and name.startswith("logvar.")):
            continue
        g = _grad_of(name, t, grads, allow_missing)
        if g is None:
            continue
        t.data = t.data - lr * g


def decays(name: str) -> bool:
    # weight decay only on weight matrices, never biases or log-variances
    return name.rsplit(".", 1)[-1].startswith("W")


@dataclass
class OptState:
    kind: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    counts: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")

    def copy(self) -> "OptState":
        return OptState(
            self.kind, self.lr, self.weight_decay, self.beta1, self.beta2, self.eps, self.step,
            {k: v.copy() for k, v in self.m.items()},
            {k: v.copy() for k, v in self.v.items()},
            dict(self.counts),
        )


def adamw_step(state: OptState, p: ParamSet, grads: Optional[Mapping[str, np.ndarray]] = None, allow_missing: bool = False) -> None:
    """One decoupled-weight-decay Adam update, in place on ``state`` and ``p``.

    Frozen parameters are skipped entirely, including their moment buffers;
    bias correction uses each parameter's own update count so heads added or
    unfrozen later start their correction from one.
    """
    if state.kind == "sgd":
        sgd_step(p, state.lr, grads, allow_missing)
        state.step += 1
        return
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, t in p.named():
        if p.is_frozen(name):
            continue
        g = _grad_of(name, t, grads, allow_missing)
        if g is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        n = state.counts.get(name, 0) + 1
        state.m[name], state.v[name], state.counts[name] = m, v, n
        c1 = 1.0 - b1**n
        c2 = 1.0 - b2**n
        data = t.data
        if state.weight_decay and decays(name):
            data = data * (1.0 - state.lr * state.weight_decay)
        t.data = data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
