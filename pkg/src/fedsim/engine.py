"""Round orchestration: select, train locally, aggregate, evaluate, adapt."""

from __future__ import annotations

import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from fedsim.aggregation import AggregationBatch, Aggregator, Update
from fedsim.config import ExperimentConfig
from fedsim.errors import DivergenceError, FedSimError, RoundError, UsageError
from fedsim.hyper import HyperDecision, HyperSchedule
from fedsim.metrics import MetricRecord, average_records, evaluate_labels
from fedsim.numerics import ParamVector
from fedsim.partition import Shard, build_shards
from fedsim.selection import Selector, TimeHistory
from fedsim.synthtask import (
    TrainConfig,
    generate_dataset,
    init_model,
    local_train,
    predict_labels,
    scan_loss,
)

log = logging.getLogger(__name__)


@dataclass
class CollaboratorState:
    collaborator_id: str
    shard: Shard
    speed_factor: float = 1.0

    @property
    def n_samples(self) -> int:
        return self.shard.n_train


@dataclass(frozen=True)
class CollaboratorRound:
    train_loss: float
    tau: int
    round_time: float
    n_samples: int


@dataclass(frozen=True)
class ScanResult:
    collaborator_id: str
    scan_id: int
    metrics: MetricRecord


@dataclass(frozen=True)
class RoundLog:
    round: int
    selected: Tuple[str, ...]
    decision: HyperDecision
    lr_used: float
    collaborators: Dict[str, CollaboratorRound]
    metrics: MetricRecord
    agg_loss: float
    round_time: float
    cum_time: float
    scan_metrics: Tuple[ScanResult, ...] = field(default=(), repr=False)

    @property
    def mean_dice(self) -> float:
        return self.metrics.mean_dice

    @property
    def epochs(self) -> int:
        return self.decision.epochs_per_round


def simulate_round_time(collaborator: CollaboratorState, tau: int, tm) -> float:
    """Fixed communication overhead plus per-step compute scaled by device speed."""
    if tau < 1:
        raise UsageError(f"tau must be >= 1, got {tau}")
    return tm.comm_overhead + tm.step_cost * tau / collaborator.speed_factor


def barrier_time(collaborator_times: Sequence[float], agg_cost: float) -> float:
    """Synchronous round: the slowest selected collaborator plus aggregation."""
    return max(collaborator_times) + agg_cost


def collaborator_seed(seed: int, collaborator_id: str, round_idx: int) -> List[int]:
    return [seed, zlib.crc32(collaborator_id.encode("utf-8")), round_idx]


def evaluate_model(model: ParamVector, shards: Sequence[Shard]):
    """Metrics of ``model`` on every shard's validation scans.

    Returns the validation-size-weighted record, the matching mean loss, and
    the per-scan results.
    """
    per_shard, per_shard_loss, weights, scans = [], [], [], []
    for shard in shards:
        records = []
        losses = []
        for scan in shard.validation:
            rec = evaluate_labels(predict_labels(model, scan), scan.labels)
            records.append(rec)
            losses.append(scan_loss(model, scan))
            scans.append(ScanResult(shard.collaborator_id, scan.scan_id, rec))
        per_shard.append(average_records(records))
        per_shard_loss.append(float(np.mean(losses)))
        weights.append(len(records))
    w = np.asarray(weights, dtype=np.float64) / sum(weights)
    loss = float(sum(wi * li for wi, li in zip(w, per_shard_loss)))
    return average_records(per_shard, weights), loss, tuple(scans)


@dataclass
class ExperimentState:
    config: ExperimentConfig
    collaborators: Dict[str, CollaboratorState]
    global_model: ParamVector
    aggregator: Aggregator
    hyper: HyperSchedule
    selector: Selector
    history: TimeHistory = field(default_factory=TimeHistory)
    round_idx: int = 0
    cum_time: float = 0.0
    prev_global_val: Optional[float] = None

    @property
    def pool(self) -> List[str]:
        return sorted(self.collaborators)

    @property
    def shards(self) -> List[Shard]:
        return [self.collaborators[cid].shard for cid in self.pool]


def build_shards_for(config: ExperimentConfig) -> List[Shard]:
    d = config.dataset
    dataset = generate_dataset(
        d.n_scans, config.seed, (d.mean_radius, d.radius_spread), d.grid_size, d.noise
    )
    return build_shards(dataset, config.partition, config.seed)


def init_state(config: ExperimentConfig) -> ExperimentState:
    shards = build_shards_for(config)
    tm = config.time_model
    collaborators = {
        s.collaborator_id: CollaboratorState(s.collaborator_id, s, tm.speed(s.collaborator_id))
        for s in shards
    }
    h = config.hyper
    return ExperimentState(
        config=config,
        collaborators=collaborators,
        global_model=init_model(config.seed, config.dataset.hidden),
        aggregator=Aggregator(config.aggregator.name, config.aggregator.beta, config.aggregator.gamma),
        hyper=HyperSchedule(h.name, h.lr0, h.patience, h.decay_factor, h.e0, h.epochs),
        selector=Selector(config.selector.name, config.selector.k),
    )


def _train_one(state: ExperimentState, cid: str, cfg: TrainConfig, model: ParamVector):
    collab = state.collaborators[cid]
    seed = collaborator_seed(state.config.seed, cid, state.round_idx)
    try:
        result = local_train(model, collab.shard.train, cfg, seed)
    except DivergenceError as exc:
        raise DivergenceError(
            f"round {state.round_idx}: collaborator {cid} diverged: {exc}",
            collaborator_id=cid,
            round_idx=state.round_idx,
        ) from exc
    local_records = [
        evaluate_labels(predict_labels(result.model, scan), scan.labels) for scan in collab.shard.validation
    ]
    update = Update(
        collaborator_id=cid,
        delta=result.delta,
        tau=result.tau,
        n_samples=result.n_samples,
        train_loss=result.train_loss,
        val_metrics=average_records(local_records),
    )
    return update, simulate_round_time(collab, result.tau, state.config.time_model)


def run_round(state: ExperimentState, executor: Optional[ThreadPoolExecutor] = None) -> RoundLog:
    """Advance ``state`` by one synchronous round and return its log."""
    config = state.config
    r = state.round_idx
    select_rng = np.random.default_rng([config.seed, 0x5E1EC7, r])
    selected = state.selector(state.pool, state.history, r, select_rng)
    decision = state.hyper.decision()
    lr = decision.lr * config.hyper.lr_scale
    train_cfg = TrainConfig(
        lr=lr,
        epochs=decision.epochs_per_round,
        batch_size=config.dataset.batch_size,
        pixels_per_scan=config.dataset.pixels_per_scan,
        foreground_fraction=config.dataset.foreground_fraction,
    )
    model = state.global_model

    def job(cid):
        return _train_one(state, cid, train_cfg, model)

    if executor is None:
        results = [job(cid) for cid in selected]
    else:
        results = list(executor.map(job, selected))

    updates = [u for u, _ in results]
    collab_rounds = {}
    for update, seconds in results:
        state.history.record(update.collaborator_id, r, seconds)
        collab_rounds[update.collaborator_id] = CollaboratorRound(
            update.train_loss, update.tau, seconds, update.n_samples
        )

    batch = AggregationBatch(tuple(updates), prev_global_val=state.prev_global_val)
    new_model = state.aggregator(model, batch)
    if not new_model.is_finite():
        raise DivergenceError(f"round {r}: aggregated model is non-finite", round_idx=r)

    metrics, agg_loss, scans = evaluate_model(new_model, state.shards)
    total_n = sum(u.n_samples for u in updates)
    round_loss = sum(u.n_samples / total_n * u.train_loss for u in batch.updates)
    state.hyper.observe(metrics.mean_dice, round_loss)

    round_time = barrier_time([seconds for _, seconds in results], config.time_model.agg_cost)
    state.cum_time += round_time
    state.global_model = new_model
    state.prev_global_val = metrics.mean_dice
    state.round_idx += 1
    log.debug("round %d: mean dice %.4f, loss %.4f", r, metrics.mean_dice, agg_loss)
    return RoundLog(
        round=r,
        selected=tuple(selected),
        decision=decision,
        lr_used=lr,
        collaborators=collab_rounds,
        metrics=metrics,
        agg_loss=agg_loss,
        round_time=round_time,
        cum_time=state.cum_time,
        scan_metrics=scans,
    )


def run_experiment(
    config: ExperimentConfig,
    workers: int = 1,
    on_round: Optional[Callable[[RoundLog], None]] = None,
) -> List[RoundLog]:
    """Run ``config.rounds`` rounds. Output is identical for every ``workers`` value.

    If a round fails, the raised error carries the completed logs in
    ``partial_logs``.
    """
    state = init_state(config)
    logs: List[RoundLog] = []
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for _ in range(config.rounds):
            try:
                entry = run_round(state, executor)
            except FedSimError as exc:
                exc.partial_logs = list(logs)
                raise
            logs.append(entry)
            if on_round is not None:
                on_round(entry)
    finally:
        if executor is not None:
            executor.shutdown()
    return logs


def convergence_score(logs: Sequence[RoundLog]) -> float:
    """Area under the (runtime, mean Dice) curve with runtime rescaled to [0, 1].

    The time axis runs from the first logged round to the last, so a flat
    curve scores its own value. A single round scores its mean Dice.
    """
    if len(logs) == 0:
        raise UsageError("convergence_score needs at least one round")
    return curve_area([e.cum_time for e in logs], [e.mean_dice for e in logs])


def curve_area(times: Sequence[float], values: Sequence[float]) -> float:
    if len(times) == 0 or len(times) != len(values):
        raise UsageError("times and values must be non-empty and equally long")
    if len(times) == 1:
        return float(values[0])
    t = np.asarray(times, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    span = t[-1] - t[0]
    if not span > 0:
        raise UsageError("round times must be strictly increasing")
    x = (t - t[0]) / span
    return float(np.sum(np.diff(x) * (v[1:] + v[:-1]) / 2.0))
