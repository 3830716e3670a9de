import numpy as np
import pytest

from fedsim import engine
from fedsim.aggregation import Aggregator
from fedsim.config import TimeModel, desk_profile
from fedsim.engine import (
    CollaboratorState,
    barrier_time,
    convergence_score,
    curve_area,
    init_state,
    run_experiment,
    run_round,
    simulate_round_time,
)
from fedsim.errors import DivergenceError, UsageError
from fedsim.hyper import HyperDecision
from fedsim.synthtask import TrainConfig, local_train


def small(**overrides):
    base = {"rounds": 3, "dataset.n_scans": 30, "dataset.grid_size": 24, "dataset.mean_radius": 5.0}
    base.update(overrides)
    return desk_profile(**base)


def collab(speed=1.0):
    return CollaboratorState("inst01", shard=None, speed_factor=speed)


def test_round_time_formula():
    tm = TimeModel(comm_overhead=1.0, step_cost=0.1)
    assert simulate_round_time(collab(), 5, tm) == pytest.approx(1.5)
    assert simulate_round_time(collab(), 10, tm) - 1.0 == pytest.approx(2 * 0.5)
    assert simulate_round_time(collab(2.0), 5, tm) - 1.0 == pytest.approx(0.25)
    with pytest.raises(UsageError):
        simulate_round_time(collab(), 0, tm)


def test_barrier_time():
    assert barrier_time([1.5, 3.0, 2.0], 0.1) == pytest.approx(3.1)


class FrozenLR:
    def decision(self):
        return HyperDecision(0.0, 1)

    def observe(self, mean_dice, round_loss):
        pass


def test_zero_delta_round_is_fixed_point():
    state = init_state(small())
    state.hyper = FrozenLR()
    first = run_round(state)
    model = state.global_model
    second = run_round(state)
    assert state.global_model == model
    assert first.metrics == second.metrics
    assert first.agg_loss == second.agg_loss


def test_single_collaborator_fedavg_takes_local_model():
    state = init_state(small(**{"selector.name": "random_subset", "selector.k": 1}))
    start = state.global_model
    entry = run_round(state)
    (cid,) = entry.selected
    decision = entry.decision
    cfg = TrainConfig(lr=entry.lr_used, epochs=decision.epochs_per_round, batch_size=8)
    local = local_train(start, state.collaborators[cid].shard.train, cfg, engine.collaborator_seed(0, cid, 0))
    assert state.global_model == local.model


def test_identical_collaborators_follow_common_trajectory(monkeypatch):
    cfg = small(rounds=1)
    state = init_state(cfg)
    shard = state.collaborators["inst01"].shard
    for c in state.collaborators.values():
        c.shard = shard
    monkeypatch.setattr(engine, "collaborator_seed", lambda seed, cid, r: [seed, r])
    start = state.global_model
    entry = run_round(state)
    local = local_train(start, shard.train, TrainConfig(lr=entry.lr_used, epochs=1, batch_size=8), [0, 0])
    np.testing.assert_allclose(state.global_model.values, local.model.values, rtol=0, atol=1e-15)


def test_rounds_count_and_time():
    logs = run_experiment(small(rounds=4))
    assert [e.round for e in logs] == [0, 1, 2, 3]
    times = [e.cum_time for e in logs]
    assert all(b > a for a, b in zip(times, times[1:]))
    for e in logs:
        assert all(e.round_time >= c.round_time for c in e.collaborators.values())
    assert len(run_experiment(small(rounds=1))) == 1


def _fingerprint(logs):
    return [(e.metrics, e.agg_loss, e.cum_time, e.selected, e.decision) for e in logs]


def test_deterministic_across_runs_and_workers():
    cfg = small(rounds=3, **{"aggregator.name": "fedavgm"})
    a = run_experiment(cfg)
    b = run_experiment(cfg)
    c = run_experiment(cfg, workers=4)
    assert _fingerprint(a) == _fingerprint(b) == _fingerprint(c)


def test_fedavgm_matches_fedavg_for_one_round_only():
    avg = run_experiment(small(rounds=2))
    mom = run_experiment(small(rounds=2, **{"aggregator.name": "fedavgm"}))
    assert avg[0].metrics == mom[0].metrics
    assert avg[1].agg_loss != mom[1].agg_loss


def test_faster_than_random_uses_speeds():
    speeds = {f"inst{i:02d}": float(i) for i in range(1, 15)}
    cfg = small(rounds=6, **{"selector.name": "faster_than_random", "time_model.speed_factors": speeds})
    logs = run_experiment(cfg)
    assert len(logs[0].selected) == 14
    for e in logs[1:]:
        assert 1 <= len(e.selected) <= 14
        assert set(e.selected) <= set(speeds)


def test_improved_nodes_runs():
    logs = run_experiment(small(rounds=3, **{"aggregator.name": "fedavgm+improved_nodes"}))
    assert len(logs) == 3


def test_divergence_carries_context():
    cfg = small(rounds=5, **{"hyper.lr_scale": 1e12})
    with pytest.raises(DivergenceError) as info:
        run_experiment(cfg)
    assert info.value.collaborator_id is not None
    assert len(info.value.partial_logs) == info.value.round_idx


def test_scan_metrics_cover_validation():
    state = init_state(small(rounds=1))
    entry = run_round(state)
    assert len(entry.scan_metrics) == sum(s.n_val for s in state.shards)


class _Log:
    def __init__(self, t, d):
        self.cum_time = t
        self.mean_dice = d


def test_convergence_score_examples():
    flat = [_Log(t, 0.8) for t in (1.2, 2.4, 3.6, 4.8)]
    assert convergence_score(flat) == pytest.approx(0.8, abs=1e-12)
    n = 11
    linear = [_Log(2.0 * (k + 1), k / (n - 1)) for k in range(n)]
    assert convergence_score(linear) == pytest.approx(0.5, abs=1e-12)
    scaled = [_Log(10 * e.cum_time, e.mean_dice) for e in linear]
    assert convergence_score(scaled) == pytest.approx(convergence_score(linear), abs=1e-12)
    assert convergence_score([_Log(3.0, 0.42)]) == 0.42
    with pytest.raises(UsageError):
        convergence_score([])


def test_convergence_score_bounded(rng):
    for _ in range(50):
        t = np.cumsum(rng.uniform(0.1, 5, size=8))
        v = rng.uniform(0, 1, size=8)
        assert 0.0 <= curve_area(t, v) <= 1.0
