"""Server-side aggregation rules.

All rules sort contributions by ``collaborator_id`` before summing, so the
output does not depend on the order in which updates arrive.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

from fedsim.errors import DataError, LayoutError, RoundError, UsageError
from fedsim.metrics import MetricRecord
from fedsim.numerics import ParamVector, axpy, coordinate_median, weighted_sum

DEFAULT_BETA = 0.9
DEFAULT_GAMMA = 1.0

AGGREGATORS = (
    "fedavg",
    "fednova",
    "fednova_reduced",
    "fedavgm",
    "median",
    "fedavg+improved_nodes",
    "fedavgm+improved_nodes",
)


@dataclass(frozen=True)
class Update:
    """One collaborator's contribution to a round.

    ``delta`` is the pre-training global model minus the post-training local
    model, so a plain gradient step shows up with the gradient's sign.
    """

    collaborator_id: str
    delta: ParamVector
    tau: int
    n_samples: int
    train_loss: float = float("nan")
    val_metrics: Optional[MetricRecord] = None

    def __post_init__(self):
        if self.n_samples < 1:
            raise DataError(f"{self.collaborator_id}: n_samples must be >= 1")


@dataclass(frozen=True)
class AggregationBatch:
    updates: Tuple[Update, ...]
    prev_global_val: Optional[float] = None

    def __post_init__(self):
        ordered = tuple(sorted(self.updates, key=lambda u: u.collaborator_id))
        object.__setattr__(self, "updates", ordered)

    @property
    def relative_sizes(self) -> Tuple[float, ...]:
        total = sum(u.n_samples for u in self.updates)
        return tuple(u.n_samples / total for u in self.updates)

    @property
    def tau_eff(self) -> float:
        return sum(p * u.tau for p, u in zip(self.relative_sizes, self.updates))

    @property
    def deltas(self):
        return [u.delta for u in self.updates]

    def __len__(self):
        return len(self.updates)


@dataclass(frozen=True)
class MomentumState:
    velocity: ParamVector
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    @classmethod
    def zeros_like(cls, model: ParamVector, beta=DEFAULT_BETA, gamma=DEFAULT_GAMMA):
        return cls(ParamVector.zeros(model.layout), beta, gamma)

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise UsageError(f"momentum beta must be in [0, 1), got {self.beta}")
        if not self.gamma > 0.0:
            raise UsageError(f"server step gamma must be > 0, got {self.gamma}")


def _require(batch: AggregationBatch):
    if len(batch) == 0:
        raise RoundError("cannot aggregate an empty batch")


def fedavg(global_model: ParamVector, batch: AggregationBatch) -> ParamVector:
    """``x - sum_i p_i * delta_i``."""
    _require(batch)
    avg = weighted_sum(batch.deltas, batch.relative_sizes)
    return axpy(-1.0, avg, global_model)


def fednova(global_model: ParamVector, batch: AggregationBatch) -> ParamVector:
    """Normalised averaging: ``x - tau_eff * sum_i p_i * delta_i / tau_i``."""
    _require(batch)
    for u in batch.updates:
        if u.tau < 1:
            raise DataError(f"{u.collaborator_id}: tau must be >= 1, got {u.tau}")
    tau_eff = batch.tau_eff
    weights = [tau_eff * p / u.tau for p, u in zip(batch.relative_sizes, batch.updates)]
    return axpy(-1.0, weighted_sum(batch.deltas, weights), global_model)


def reduced_gamma(batch: AggregationBatch) -> float:
    """``sum_i p_i**2``, the step size at which the reduced form matches :func:`fednova`
    when every ``tau_i`` is proportional to ``n_i``."""
    return sum(p * p for p in batch.relative_sizes)


def fednova_reduced(global_model: ParamVector, deltas: Sequence[ParamVector], gamma: float) -> ParamVector:
    """``x - gamma * sum_i delta_i``; callers pass deltas already sorted by id."""
    if len(deltas) == 0:
        raise RoundError("cannot aggregate an empty batch")
    if not gamma > 0:
        raise UsageError(f"gamma must be > 0, got {gamma}")
    return axpy(-1.0, weighted_sum(deltas, [gamma] * len(deltas)), global_model)


def fedavgm(
    global_model: ParamVector, batch: AggregationBatch, state: MomentumState
) -> Tuple[ParamVector, MomentumState]:
    """Server momentum: ``v' = beta v + sum p_i delta_i``; ``x' = x - gamma v'``."""
    _require(batch)
    if state.velocity.layout != global_model.layout:
        raise LayoutError("momentum velocity layout does not match the global model")
    avg = weighted_sum(batch.deltas, batch.relative_sizes)
    velocity = axpy(state.beta, state.velocity, avg)
    new_model = axpy(-state.gamma, velocity, global_model)
    return new_model, replace(state, velocity=velocity)


def median_aggregate(global_model: ParamVector, batch: AggregationBatch) -> ParamVector:
    """Coordinate-wise median of the collaborators' post-training weights."""
    _require(batch)
    local_models = [axpy(-1.0, d, global_model) for d in batch.deltas]
    return coordinate_median(local_models)


def improved_nodes_filter(batch: AggregationBatch) -> AggregationBatch:
    """Keep updates whose local validation mean Dice beats the last global score.

    Without a previous score, or if nobody improved, the batch is returned
    unchanged. Relative sizes are renormalised automatically because they are
    derived from the surviving ``n_samples``.
    """
    if batch.prev_global_val is None:
        return batch
    survivors = tuple(
        u
        for u in batch.updates
        if u.val_metrics is not None and u.val_metrics.mean_dice > batch.prev_global_val
    )
    if not survivors:
        return batch
    return replace(batch, updates=survivors)


class Aggregator:
    """Stateful wrapper used by the engine; owns the momentum buffer if any."""

    def __init__(self, name: str, beta: float = DEFAULT_BETA, gamma: Optional[float] = None):
        if name not in AGGREGATORS:
            raise UsageError(f"unknown aggregator {name!r}; expected one of {', '.join(AGGREGATORS)}")
        self.name = name
        self.base, _, suffix = name.partition("+")
        self.filter_improved = suffix == "improved_nodes"
        self.beta = beta
        self.gamma = gamma
        self.momentum: Optional[MomentumState] = None

    def __call__(self, global_model: ParamVector, batch: AggregationBatch) -> ParamVector:
        if self.filter_improved:
            batch = improved_nodes_filter(batch)
        if self.base == "fedavg":
            return fedavg(global_model, batch)
        if self.base == "fednova":
            return fednova(global_model, batch)
        if self.base == "fednova_reduced":
            gamma = reduced_gamma(batch) if self.gamma is None else self.gamma
            return fednova_reduced(global_model, batch.deltas, gamma)
        if self.base == "median":
            return median_aggregate(global_model, batch)
        # fedavgm
        if self.momentum is None:
            gamma = DEFAULT_GAMMA if self.gamma is None else self.gamma
            self.momentum = MomentumState.zeros_like(global_model, self.beta, gamma)
        new_model, self.momentum = fedavgm(global_model, batch, self.momentum)
        return new_model
