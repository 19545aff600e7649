"""Multi-task episodes built from the power set of the source tasks."""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .tasks import Batch


class InsufficientEpisodesWarning(UserWarning):
    """Only one multi-task combination exists (two source tasks)."""


@dataclass(frozen=True)
class Episode:
    combo: Tuple[str, ...]
    support: Batch
    query: Batch


def combo_count(n: int) -> int:
    return 2**n - n - 1


def generate_combos(source_tasks: Sequence[str]) -> List[Tuple[str, ...]]:
    """All subsets with at least two tasks, by size then lexicographically.

    With exactly two source tasks there is a single combination and an
    :class:`InsufficientEpisodesWarning` is emitted.
    """
    tasks = tuple(source_tasks)
    if len(set(tasks)) != len(tasks):
        raise ValueError(f"duplicate source tasks in {tasks}")
    n = len(tasks)
    if n < 2:
        raise ValueError(f"need at least 2 source tasks to build multi-task episodes, got {n}")
    if n == 2:
        warnings.warn(
            "two source tasks give a single multi-task episode, which is too few for meta-training",
            InsufficientEpisodesWarning,
            stacklevel=2,
        )
    combos = []
    for k in range(2, n + 1):
        combos.extend(itertools.combinations(tasks, k))
    return combos


def format_combos(combos: Sequence[Tuple[str, ...]]) -> str:
    lines = [f"{'#':>3}  {'size':>4}  tasks"]
    lines += [f"{i:>3}  {len(c):>4}  {','.join(c)}" for i, c in enumerate(combos)]
    return "\n".join(lines) + "\n"


def sample_episode(combo: Sequence[str], train: Batch, support_size: int, query_size: int, seed) -> Episode:
    n = len(train)
    if support_size < 1 or query_size < 1:
        raise ValueError("support and query sizes must be >= 1")
    if support_size + query_size > n:
        raise ValueError(f"support {support_size} + query {query_size} exceeds the {n} available rows")
    rows = np.random.default_rng(seed).choice(n, size=support_size + query_size, replace=False)
    combo = tuple(combo)
    return Episode(combo, train.take(rows[:support_size], combo), train.take(rows[support_size:], combo))


def meta_batch(
    combos: Sequence[Tuple[str, ...]],
    k_per_combo: int,
    train: Batch,
    support_size: int = 16,
    query_size: int = 16,
    seed: int = 0,
) -> List[Episode]:
    """Round-robin over the combo family, ``k_per_combo`` episodes each."""
    if k_per_combo < 1:
        raise ValueError("k_per_combo must be >= 1")
    episodes = []
    for r in range(k_per_combo):
        for i, combo in enumerate(combos):
            episodes.append(sample_episode(combo, train, support_size, query_size, [seed, r, i]))
    return episodes
