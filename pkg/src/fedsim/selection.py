"""Per-round collaborator selection."""

from __future__ import annotations

import math
from collections import defaultdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from fedsim.errors import ConfigError

SELECTORS = ("all", "random_subset", "faster_than_random")


class TimeHistory:
    """Simulated round times, recorded only for rounds a collaborator trained in."""

    def __init__(self):
        self._records: Dict[str, List[Tuple[int, float]]] = defaultdict(list)

    def record(self, collaborator_id: str, round_idx: int, seconds: float):
        if not seconds > 0:
            raise ValueError(f"round time must be > 0, got {seconds}")
        self._records[collaborator_id].append((round_idx, float(seconds)))

    def latest(self, collaborator_id: str) -> Optional[float]:
        recs = self._records.get(collaborator_id)
        return recs[-1][1] if recs else None

    def records(self, collaborator_id: str) -> List[Tuple[int, float]]:
        return list(self._records.get(collaborator_id, ()))

    @classmethod
    def from_static(cls, times: Dict[str, float], round_idx: int = 0) -> "TimeHistory":
        hist = cls()
        for cid, t in times.items():
            hist.record(cid, round_idx, t)
        return hist


def _check_pool(pool: Sequence[str]) -> List[str]:
    if len(pool) == 0:
        raise ConfigError("collaborator pool is empty")
    if len(set(pool)) != len(pool):
        raise ConfigError("collaborator pool contains duplicates")
    return sorted(pool)


def select_all(pool: Sequence[str]) -> List[str]:
    return _check_pool(pool)


def select_random_subset(pool: Sequence[str], k: int, rng: np.random.Generator) -> List[str]:
    pool = _check_pool(pool)
    if not 1 <= k <= len(pool):
        raise ConfigError(f"subset size k={k} outside [1, {len(pool)}]")
    picked = rng.choice(len(pool), size=k, replace=False)
    return sorted(pool[i] for i in picked)


def faster_than(pool: Sequence[str], history: TimeHistory, pivot: str) -> List[str]:
    """The pivot plus everyone whose latest round time is strictly below the pivot's.

    Collaborators without any record count as infinitely slow.
    """
    def latest(cid):
        t = history.latest(cid)
        return math.inf if t is None else t

    bound = latest(pivot)
    return sorted(cid for cid in pool if cid == pivot or latest(cid) < bound)


def select_faster_than_random(
    pool: Sequence[str], history: TimeHistory, round_idx: int, rng: np.random.Generator
) -> List[str]:
    pool = _check_pool(pool)
    if round_idx < 0:
        raise ConfigError(f"round must be >= 0, got {round_idx}")
    if round_idx == 0:
        return pool
    pivot = pool[int(rng.integers(len(pool)))]
    return faster_than(pool, history, pivot)


def default_subset_size(pool_size: int) -> int:
    return math.ceil(pool_size / 2)


class Selector:
    def __init__(self, name: str, k: Optional[int] = None):
        if name not in SELECTORS:
            raise ConfigError(f"unknown selector {name!r}; expected one of {', '.join(SELECTORS)}")
        self.name = name
        self.k = k

    def __call__(self, pool, history: TimeHistory, round_idx: int, rng) -> List[str]:
        if self.name == "all":
            return select_all(pool)
        if self.name == "random_subset":
            k = default_subset_size(len(pool)) if self.k is None else self.k
            return select_random_subset(pool, k, rng)
        return select_faster_than_random(pool, history, round_idx, rng)
