"""Synthetic heterogeneous tasks derived from one shared latent world.

All four tasks read the same input ``x``. A fixed random two-layer tanh map
produces a latent ``z`` and each task is a different readout of ``z``:

* T1 - classification: ``argmax(A1 z + o1)`` over ``n_classes`` (``o1`` balances classes)
* T2 - scalar regression: ``a . z + b``
* T3 - unit-vector regression: ``normalize(A3 z + eps)``
* T4 - robust regression: ``min(|a4 . z|, q90)``, heavy-tailed before clipping
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

TASK_IDS = ("T1", "T2", "T3", "T4")

CLASSIFICATION = "classification"
SCALAR = "scalar_regression"
UNITVEC = "unitvec_regression"
ROBUST = "robust_regression"

_LOSS_FOR_KIND = {
    CLASSIFICATION: "cross_entropy",
    SCALAR: "mse",
    UNITVEC: "inverse_cosine",
    ROBUST: "huber",
}

_METRICS_FOR_KIND = {
    CLASSIFICATION: ("accuracy",),
    SCALAR: ("mae",),
    UNITVEC: (
        "cosine_sim",
        "angular_mean_deg",
        "angular_median_deg",
        "pct_within_11_25",
        "pct_within_22_5",
        "pct_within_30",
    ),
    ROBUST: ("mae",),
}


@dataclass(frozen=True)
class TaskSpec:
    id: str
    kind: str
    out_dim: int

    @property
    def loss_id(self) -> str:
        return _LOSS_FOR_KIND[self.kind]

    @property
    def metric_ids(self) -> Tuple[str, ...]:
        return _METRICS_FOR_KIND[self.kind]


def default_tasks(n_classes: int = 4) -> Dict[str, TaskSpec]:
    return {
        "T1": TaskSpec("T1", CLASSIFICATION, n_classes),
        "T2": TaskSpec("T2", SCALAR, 1),
        "T3": TaskSpec("T3", UNITVEC, 3),
        "T4": TaskSpec("T4", ROBUST, 1),
    }


def task_index(task_id: str) -> int:
    return TASK_IDS.index(task_id)


@dataclass
class WorldFn:
    """Latent map plus the fixed task readouts, all drawn from one seeded stream."""

    seed: int
    d_in: int
    d_z: int
    n_classes: int
    W1: np.ndarray
    c1: np.ndarray
    W2: np.ndarray
    c2: np.ndarray
    A1: np.ndarray
    o1: np.ndarray
    a2: np.ndarray
    b2: float
    A3: np.ndarray
    a4: np.ndarray
    t4_clip: float
    noise: float = 0.0

    def latent(self, x: np.ndarray) -> np.ndarray:
        h = np.tanh(x @ self.W1.T + self.c1)
        return np.tanh(h @ self.W2.T + self.c2)

    @property
    def tasks(self) -> Dict[str, TaskSpec]:
        return default_tasks(self.n_classes)


def make_world(seed: int, d_in: int = 8, d_z: int = 16, n_classes: int = 4, noise: float = 0.0) -> WorldFn:
    if d_in < 1 or d_z < 1:
        raise ValueError("d_in and d_z must be >= 1")
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)  # noqa: E731
    W1, c1 = u(d_z, d_in), u(d_z)
    W2, c2 = u(d_z, d_z), u(d_z)
    A1 = u(n_classes, d_z)
    a2, b2 = u(d_z), float(u())
    A3 = u(3, d_z)
    a4 = u(d_z)
    world = WorldFn(
        seed, d_in, d_z, n_classes, W1, c1, W2, c2, A1, np.zeros(n_classes), a2, b2, A3, a4, t4_clip=np.inf, noise=noise
    )
    # calibration constants come from a fixed reference draw, not from any split
    ref = world.latent(np.random.default_rng([seed, 90]).uniform(-1.0, 1.0, size=(10_000, d_in)))
    world.t4_clip = float(np.quantile(np.abs(ref @ a4), 0.9))
    world.o1 = _balance_offsets(ref @ A1.T)
    return world


def _balance_offsets(scores: np.ndarray, iters: int = 500, step: float = 0.5) -> np.ndarray:
    # per-class logit offsets pushing argmax frequencies toward uniform
    C = scores.shape[1]
    off = -scores.mean(axis=0)
    for _ in range(iters):
        freq = np.bincount(np.argmax(scores + off, axis=1), minlength=C) / len(scores)
        off -= step * (freq - 1.0 / C) * scores.std()
    return off


@dataclass
class Batch:
    x: np.ndarray
    targets: Dict[str, np.ndarray] = field(default_factory=dict)

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def task_ids(self) -> Tuple[str, ...]:
        return tuple(t for t in TASK_IDS if t in self.targets)

    def take(self, rows, tasks: Optional[Iterable[str]] = None) -> "Batch":
        keep = self.task_ids if tasks is None else tuple(tasks)
        rows = np.asarray(rows)
        return Batch(self.x[rows].copy(), {t: self.targets[t][rows].copy() for t in keep})

    def digest(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.x).tobytes())
        for t in self.task_ids:
            h.update(t.encode())
            h.update(np.ascontiguousarray(self.targets[t]).tobytes())
        return h.hexdigest()

    def to_text(self) -> str:
        """Columnar text: a header of field names, then one sample per line."""
        cols, names = [self.x], [f"x{i}" for i in range(self.x.shape[1])]
        for t in self.task_ids:
            y = self.targets[t].reshape(len(self), -1)
            cols.append(y.astype(np.float64))
            names += [t] if y.shape[1] == 1 else [f"{t}_{j}" for j in range(y.shape[1])]
        buf = io.StringIO()
        np.savetxt(buf, np.hstack(cols), delimiter=",", header=",".join(names), comments="", fmt="%.17g")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "Batch":
        lines = text.splitlines()
        names = lines[0].split(",")
        arr = np.loadtxt(io.StringIO("\n".join(lines[1:])), delimiter=",", ndmin=2)
        x = arr[:, [i for i, n in enumerate(names) if n.startswith("x")]]
        targets = {}
        for t in TASK_IDS:
            idx = [i for i, n in enumerate(names) if n == t or n.startswith(t + "_")]
            if not idx:
                continue
            y = arr[:, idx]
            if t == "T1":
                targets[t] = y[:, 0].astype(np.int64)
            elif len(idx) == 1:
                targets[t] = y.reshape(-1, 1)
            else:
                targets[t] = y
        return cls(x, targets)


def targets_for(world: WorldFn, x: np.ndarray, tasks: Iterable[str], rng: Optional[np.random.Generator] = None) -> Dict[str, np.ndarray]:
    z = world.latent(x)
    noisy = world.noise > 0.0
    if noisy and rng is None:
        rng = np.random.default_rng(0)
    out: Dict[str, np.ndarray] = {}
    for t in TASK_IDS:
        if t not in tasks:
            continue
        if t == "T1":
            out[t] = np.argmax(z @ world.A1.T + world.o1, axis=1).astype(np.int64)
        elif t == "T2":
            y = z @ world.a2 + world.b2
            if noisy:
                y = y + world.noise * rng.standard_normal(y.shape)
            out[t] = y.reshape(-1, 1)
        elif t == "T3":
            v = z @ world.A3.T
            if noisy:
                v = v + world.noise * rng.standard_normal(v.shape)
            out[t] = v / np.linalg.norm(v, axis=1, keepdims=True)
        elif t == "T4":
            y = np.minimum(np.abs(z @ world.a4), world.t4_clip)
            if noisy:
                y = y + world.noise * rng.standard_normal(y.shape)
            out[t] = y.reshape(-1, 1)
    unknown = set(tasks) - set(TASK_IDS)
    if unknown:
        raise KeyError(f"unknown task ids {sorted(unknown)}")
    return out


def sample_batch(world: WorldFn, tasks: Iterable[str], B: int, seed: int) -> Batch:
    if B < 1:
        raise ValueError(f"batch size must be >= 1, got {B}")
    tasks = tuple(tasks)
    if not tasks:
        raise ValueError("at least one task is required")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(B, world.d_in))
    return Batch(x, targets_for(world, x, tasks, rng))


def make_splits(
    world: WorldFn,
    sizes: Tuple[int, int, int] = (512, 128, 256),
    seed: int = 0,
    tasks: Iterable[str] = TASK_IDS,
) -> Tuple[Batch, Batch, Batch]:
    """Disjoint train/val/test batches drawn from one seeded stream."""
    if any(s < 1 for s in sizes):
        raise ValueError(f"all split sizes must be >= 1, got {sizes}")
    n = int(sum(sizes))
    full = sample_batch(world, tasks, n, seed)
    if len({row.tobytes() for row in full.x}) != n:
        raise RuntimeError("duplicate input rows drawn; choose another seed")
    a, b = sizes[0], sizes[0] + sizes[1]
    return full.take(np.arange(0, a)), full.take(np.arange(a, b)), full.take(np.arange(b, n))


def splits_digest(splits: Tuple[Batch, Batch, Batch]) -> str:
    h = hashlib.sha256()
    for s in splits:
        h.update(s.digest().encode())
    return h.hexdigest()[:16]
