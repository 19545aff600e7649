"""Shared trunk with per-task heads and per-task uncertainty log-variances."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from . import tensor as T
from .tasks import TASK_IDS, default_tasks, task_index
from .tensor import Tensor

CHECKPOINT_FORMAT = "mtml-checkpoint/1"


@dataclass
class NetConfig:
    d_in: int = 8
    trunk_widths: Tuple[int, ...] = (32, 32)
    d_repr: int = 16
    head_widths: Mapping[str, Tuple[int, ...]] = field(default_factory=lambda: {t: (16,) for t in TASK_IDS})
    out_dims: Mapping[str, int] = field(default_factory=lambda: {t: s.out_dim for t, s in default_tasks().items()})
    activation: str = "tanh"

    def __post_init__(self):
        self.trunk_widths = tuple(int(w) for w in self.trunk_widths)
        self.head_widths = {t: tuple(int(w) for w in ws) for t, ws in self.head_widths.items()}
        self.out_dims = {t: int(d) for t, d in self.out_dims.items()}
        widths = [self.d_in, self.d_repr, *self.trunk_widths, *self.out_dims.values()]
        widths += [w for ws in self.head_widths.values() for w in ws]
        if any(w < 1 for w in widths):
            raise ValueError("all layer widths must be >= 1")
        if set(self.head_widths) != set(self.out_dims):
            raise ValueError("head_widths and out_dims must cover the same tasks")
        if self.activation not in ("tanh", "relu"):
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def tasks(self) -> Tuple[str, ...]:
        return tuple(t for t in TASK_IDS if t in self.out_dims)

    def trunk_dims(self) -> List[int]:
        return [self.d_in, *self.trunk_widths, self.d_repr]

    def head_dims(self, task: str) -> List[int]:
        return [self.d_repr, *self.head_widths[task], self.out_dims[task]]

    def param_count(self, tasks: Optional[Iterable[str]] = None) -> int:
        tasks = self.tasks if tasks is None else tuple(tasks)
        count = _layers_count(self.trunk_dims())
        for t in tasks:
            count += _layers_count(self.head_dims(t)) + 1
        return count

    def to_dict(self) -> dict:
        return {
            "d_in": self.d_in,
            "trunk_widths": list(self.trunk_widths),
            "d_repr": self.d_repr,
            "head_widths": {t: list(w) for t, w in self.head_widths.items()},
            "out_dims": dict(self.out_dims),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetConfig":
        return cls(**{**d, "trunk_widths": tuple(d["trunk_widths"])})


def _layers_count(dims: Sequence[int]) -> int:
    return sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))


@dataclass
class ParamSet:
    """Trunk (meta parameters), heads (task parameters) and log-variances.

    ``frozen`` holds task ids whose heads must not move; ``trunk_frozen``
    freezes the shared trunk.
    """

    trunk: Dict[str, Tensor]
    heads: Dict[str, Dict[str, Tensor]]
    logvars: Dict[str, Tensor]
    frozen: Set[str] = field(default_factory=set)
    trunk_frozen: bool = False
    activation: str = "tanh"

    @property
    def tasks(self) -> Tuple[str, ...]:
        return tuple(t for t in TASK_IDS if t in self.heads)

    def named(self) -> List[Tuple[str, Tensor]]:
        """Canonical ordering: trunk layers, heads in task order, then logvars."""
        out = [(f"trunk.{k}", v) for k, v in self.trunk.items()]
        for t in self.tasks:
            out += [(f"head.{t}.{k}", v) for k, v in self.heads[t].items()]
        out += [(f"logvar.{t}", self.logvars[t]) for t in self.tasks]
        return out

    def is_frozen(self, name: str) -> bool:
        group, _, rest = name.partition(".")
        if group == "trunk":
            return self.trunk_frozen
        if group == "head":
            return rest.split(".", 1)[0] in self.frozen
        return rest in self.frozen

    def zero_grad(self) -> None:
        for _, t in self.named():
            t.grad = None

    def clear_frozen_grads(self) -> None:
        for name, t in self.named():
            if self.is_frozen(name):
                t.grad = None

    def copy(self) -> "ParamSet":
        return ParamSet(
            {k: _leaf(v.data) for k, v in self.trunk.items()},
            {t: {k: _leaf(v.data) for k, v in h.items()} for t, h in self.heads.items()},
            {t: _leaf(v.data) for t, v in self.logvars.items()},
            set(self.frozen),
            self.trunk_frozen,
            self.activation,
        )

    def equals(self, other: "ParamSet") -> bool:
        a, b = self.named(), other.named()
        return [n for n, _ in a] == [n for n, _ in b] and all(
            np.array_equal(x.data, y.data) for (_, x), (_, y) in zip(a, b)
        )

    def subset(self, tasks: Iterable[str]) -> "ParamSet":
        tasks = set(tasks)
        p = self.copy()
        p.heads = {t: h for t, h in p.heads.items() if t in tasks}
        p.logvars = {t: s for t, s in p.logvars.items() if t in tasks}
        p.frozen &= tasks
        return p


def _leaf(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _init_layers(dims: Sequence[int], rng: np.random.Generator) -> Dict[str, Tensor]:
    layers = {}
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = np.sqrt(1.0 / fan_in)
        layers[f"W{i}"] = _leaf(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        layers[f"b{i}"] = _leaf(np.zeros(fan_out))
    return layers


def init_head(cfg: NetConfig, task: str, seed: int) -> Dict[str, Tensor]:
    return _init_layers(cfg.head_dims(task), np.random.default_rng([seed, 1 + task_index(task)]))


def init_params(cfg: NetConfig, seed: int, tasks: Optional[Iterable[str]] = None) -> ParamSet:
    """Uniform(+-sqrt(1/fan_in)) weights, zero biases, zero log-variances.

    Each head draws from its own stream keyed by (seed, task index), so a head
    added later for fine-tuning gets the same values it would have had at
    construction time.
    """
    tasks = cfg.tasks if tasks is None else tuple(t for t in TASK_IDS if t in set(tasks))
    unknown = set(tasks) - set(cfg.tasks)
    if unknown:
        raise KeyError(f"tasks {sorted(unknown)} are not configured")
    trunk = _init_layers(cfg.trunk_dims(), np.random.default_rng([seed, 0]))
    heads = {t: init_head(cfg, t, seed) for t in tasks}
    logvars = {t: _leaf(0.0) for t in tasks}
    return ParamSet(trunk, heads, logvars, activation=cfg.activation)


def add_tasks(p: ParamSet, cfg: NetConfig, tasks: Iterable[str], seed: int) -> ParamSet:
    """Copy of ``p`` with freshly initialised heads (and zero logvars) for ``tasks``."""
    q = p.copy()
    for t in tasks:
        if t in q.heads:
            raise ValueError(f"task {t} already has a head")
        q.heads[t] = init_head(cfg, t, seed)
        q.logvars[t] = _leaf(0.0)
    q.heads = {t: q.heads[t] for t in TASK_IDS if t in q.heads}
    q.logvars = {t: q.logvars[t] for t in TASK_IDS if t in q.logvars}
    return q


def _act(x: Tensor, kind: str) -> Tensor:
    return T.tanh(x) if kind == "tanh" else T.relu(x)


def _mlp(x: Tensor, layers: Mapping[str, Tensor], act: str, last_act: bool) -> Tensor:
    n = len(layers) // 2
    for i in range(n):
        x = T.linear(x, layers[f"W{i}"], layers[f"b{i}"])
        if i < n - 1 or last_act:
            x = _act(x, act)
    return x


def representation(p: ParamSet, x) -> Tensor:
    return _mlp(T.as_tensor(x), p.trunk, p.activation, last_act=True)


def forward(p: ParamSet, x, tasks: Iterable[str]) -> Dict[str, Tensor]:
    """One trunk pass, then one head pass per requested task."""
    tasks = tuple(tasks)
    unknown = [t for t in tasks if t not in p.heads]
    if unknown:
        raise KeyError(f"unknown task ids {unknown}")
    if not tasks:
        return {}
    h = representation(p, x)
    return {t: _mlp(h, p.heads[t], p.activation, last_act=False) for t in tasks}


def flatten(p: ParamSet) -> np.ndarray:
    return np.concatenate([t.data.reshape(-1) for _, t in p.named()])


def flatten_grads(p: ParamSet) -> np.ndarray:
    return np.concatenate(
        [np.zeros(t.size) if t.grad is None else t.grad.reshape(-1) for _, t in p.named()]
    )


def unflatten(p: ParamSet, vec: np.ndarray) -> ParamSet:
    """New ParamSet shaped like ``p`` holding the values of ``vec``."""
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(t.size for _, t in p.named())
    if vec.shape != (total,):
        raise ValueError(f"expected a vector of length {total}, got shape {vec.shape}")
    q = p.copy()
    i = 0
    for _, t in q.named():
        t.data = vec[i : i + t.size].reshape(t.shape).copy()
        i += t.size
    return q


# ---------------------------------------------------------------------------
# checkpoints: text manifest + raw little-endian float64 vector


def _checkpoint_files(path) -> Tuple[Path, Path]:
    # the suffixes are appended, so stems containing dots (e.g. "4.3_s0") survive
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.parent / (path.name + ".json"), path.parent / (path.name + ".bin")


def save_checkpoint(p: ParamSet, cfg: NetConfig, path, seed: Optional[int] = None) -> None:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (flat parameters)."""
    meta_path, bin_path = _checkpoint_files(path)
    named = p.named()
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "net_config": cfg.to_dict(),
        "tasks": list(p.tasks),
        "frozen": sorted(p.frozen),
        "trunk_frozen": p.trunk_frozen,
        "ordering": [[n, list(t.shape)] for n, t in named],
        "seed": seed,
    }
    meta_path.write_text(json.dumps(manifest, indent=2) + "\n")
    bin_path.write_bytes(flatten(p).astype("<f8").tobytes())


def load_checkpoint(path) -> Tuple[ParamSet, NetConfig]:
    meta_path, bin_path = _checkpoint_files(path)
    manifest = json.loads(meta_path.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unrecognised checkpoint format {manifest.get('format')!r}")
    cfg = NetConfig.from_dict(manifest["net_config"])
    template = init_params(cfg, 0, manifest["tasks"])
    names = [[n, list(t.shape)] for n, t in template.named()]
    if names != manifest["ordering"]:
        raise ValueError("checkpoint ordering does not match its network config")
    vec = np.frombuffer(bin_path.read_bytes(), dtype="<f8").astype(np.float64)
    p = unflatten(template, vec)
    p.frozen = set(manifest["frozen"])
    p.trunk_frozen = manifest["trunk_frozen"]
    return p, cfg
