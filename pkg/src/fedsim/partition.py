"""Non-IID shard construction: institutional split, tumour-size re-split, 80/20 split."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from fedsim.errors import ConfigError
from fedsim.synthtask import Scan

LARGEST_SHARE = 0.3783
SMALLEST_SHARE = 0.0088
N_INSTITUTIONS = 14
TRAIN_FRACTION = 0.8


def default_proportions(n: int = N_INSTITUTIONS) -> Tuple[float, ...]:
    """Decreasing shares with the largest and smallest institutions pinned.

    The interior institutions follow a geometric progression upward from the
    smallest share, with the ratio solved so that all shares sum to one.
    """
    if n < 3:
        raise ConfigError("default proportion table needs at least 3 institutions")
    k = n - 2
    target = 1.0 - LARGEST_SHARE - SMALLEST_SHARE

    def excess(r):
        return SMALLEST_SHARE * sum(r**j for j in range(1, k + 1)) - target

    ratio = brentq(excess, 1.0 + 1e-12, 10.0, xtol=1e-15)
    interior = [SMALLEST_SHARE * ratio**j for j in range(k, 0, -1)]
    shares = [LARGEST_SHARE] + interior + [SMALLEST_SHARE]
    if interior[0] >= LARGEST_SHARE:
        raise ConfigError(f"cannot build a decreasing table for {n} institutions")
    return tuple(shares)


@dataclass(frozen=True)
class PartitionSpec:
    proportions: Tuple[float, ...] = field(default_factory=default_proportions)
    artificial: bool = False
    artificial_bins: int = 3
    largest_k: int = 5
    min_scans: int = 2

    def __post_init__(self):
        props = tuple(float(p) for p in self.proportions)
        object.__setattr__(self, "proportions", props)
        if not props:
            raise ConfigError("partition.proportions is empty")
        if any(p <= 0 for p in props):
            raise ConfigError("every partition proportion must be > 0")
        if abs(sum(props) - 1.0) > 1e-9:
            raise ConfigError(f"partition proportions sum to {sum(props)!r}, expected 1")
        if self.min_scans < 2:
            raise ConfigError("partition.min_scans must be >= 2 (one train, one validation)")


@dataclass(frozen=True)
class Shard:
    collaborator_id: str
    train: Tuple[Scan, ...]
    validation: Tuple[Scan, ...]

    @property
    def n_train(self) -> int:
        return len(self.train)

    @property
    def n_val(self) -> int:
        return len(self.validation)

    @property
    def size(self) -> int:
        return len(self.train) + len(self.validation)

    def scans(self) -> List[Scan]:
        return list(self.train) + list(self.validation)


def largest_remainder(total: int, proportions: Sequence[float]) -> List[int]:
    """Integer apportionment of ``total`` by the largest-remainder (Hamilton) method."""
    quotas = [total * p for p in proportions]
    counts = [math.floor(q) for q in quotas]
    leftover = total - sum(counts)
    # Ties on the remainder go to the earlier institution.
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def shard_sizes(total: int, proportions: Sequence[float], minimum: int = 1) -> List[int]:
    """Largest-remainder sizes, then lift any shard below ``minimum``.

    Scans needed for the lift are taken one at a time from whichever shard is
    currently largest (lowest index on ties).
    """
    if total < minimum * len(proportions):
        raise ConfigError(
            f"{total} scans cannot give {len(proportions)} institutions at least {minimum} each"
        )
    sizes = largest_remainder(total, proportions)
    for i in range(len(sizes)):
        while sizes[i] < minimum:
            donor = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
            sizes[donor] -= 1
            sizes[i] += 1
    return sizes


def train_val_split(scans: Sequence[Scan], seed) -> Tuple[List[Scan], List[Scan]]:
    """Seeded shuffle, then ``floor(0.8 N)`` train and the rest validation."""
    scans = list(scans)
    if len(scans) < 2:
        raise ConfigError(f"need at least 2 scans for a train/validation split, got {len(scans)}")
    order = np.random.default_rng(seed).permutation(len(scans))
    n_train = min(math.floor(TRAIN_FRACTION * len(scans)), len(scans) - 1)
    shuffled = [scans[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def institution_id(index: int) -> str:
    return f"inst{index + 1:02d}"


def natural_split(dataset: Sequence[Scan], spec: PartitionSpec, seed) -> List[Shard]:
    dataset = list(dataset)
    sizes = shard_sizes(len(dataset), spec.proportions, spec.min_scans)
    order = np.random.default_rng([seed, 0x5A1]).permutation(len(dataset))
    shards = []
    start = 0
    for i, size in enumerate(sizes):
        members = [dataset[j] for j in order[start : start + size]]
        start += size
        members.sort(key=lambda s: s.scan_id)
        train, val = train_val_split(members, [seed, 0x7A1, i])
        shards.append(Shard(institution_id(i), tuple(train), tuple(val)))
    return shards


def artificial_split(shards: Sequence[Shard], bins: int, largest_k: int, seed=0) -> List[Shard]:
    """Re-split the ``largest_k`` shards (by train count) into tumour-size bins.

    Each selected shard's scans are ordered by ``(tumor_size, scan_id)`` and
    cut into ``bins`` contiguous, near-equal groups; each group then gets its
    own 80/20 split. Other shards pass through untouched.
    """
    shards = list(shards)
    if bins < 2:
        raise ConfigError(f"artificial_bins must be >= 2, got {bins}")
    if not 0 <= largest_k <= len(shards):
        raise ConfigError(f"largest_k={largest_k} outside [0, {len(shards)}]")
    ranked = sorted(range(len(shards)), key=lambda i: (-shards[i].n_train, shards[i].collaborator_id))
    chosen = set(ranked[:largest_k])
    out = []
    for i, shard in enumerate(shards):
        if i not in chosen:
            out.append(shard)
            continue
        scans = sorted(shard.scans(), key=lambda s: (s.tumor_size, s.scan_id))
        if len(scans) < 2 * bins:
            raise ConfigError(
                f"shard {shard.collaborator_id} has {len(scans)} scans, "
                f"too few for {bins} bins of at least 2"
            )
        for b, group in enumerate(np.array_split(np.arange(len(scans)), bins)):
            members = [scans[j] for j in group]
            train, val = train_val_split(members, [seed, 0xB1, i, b])
            out.append(Shard(f"{shard.collaborator_id}-b{b + 1}", tuple(train), tuple(val)))
    return out


def build_shards(dataset: Sequence[Scan], spec: PartitionSpec, seed) -> List[Shard]:
    shards = natural_split(dataset, spec, seed)
    if spec.artificial:
        shards = artificial_split(shards, spec.artificial_bins, spec.largest_k, seed)
    return sorted(shards, key=lambda s: s.collaborator_id)
