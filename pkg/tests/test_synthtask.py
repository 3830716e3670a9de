import math

import numpy as np
import pytest

from fedsim.errors import DivergenceError, StateError, UsageError
from fedsim.numerics import ParamVector, l2_norm
from fedsim.synthtask import (
    N_CLASSES,
    N_FEATURES,
    TrainConfig,
    forward,
    generate_dataset,
    generate_scan,
    gradient,
    init_model,
    local_train,
    loss,
    model_layout,
    nesting_ok,
    sample_pixels,
)


def zero_model(hidden=16):
    layout = model_layout(hidden)
    return ParamVector.zeros(layout)


def random_model(rng, hidden=16, scale=0.5):
    layout = model_layout(hidden)
    n = sum(math.prod(s) for _, s in layout)
    return ParamVector(rng.normal(scale=scale, size=n), layout)


def random_batch(rng, n=12):
    return rng.normal(size=(n, N_FEATURES)), rng.integers(0, N_CLASSES, size=n)


def finite_difference(model, batch, h=1e-6):
    grad = np.zeros(len(model))
    for i in range(len(model)):
        up = model.values.copy()
        down = model.values.copy()
        up[i] += h
        down[i] -= h
        grad[i] = (loss(ParamVector(up, model.layout), batch) - loss(ParamVector(down, model.layout), batch)) / (2 * h)
    return grad


def max_relative_error(a, b):
    return float(np.max(np.abs(a - b) / (np.maximum(np.abs(a), np.abs(b)) + 1e-8)))


# ----------------------------------------------------------------- scans ----


def test_generate_scan_deterministic():
    a = generate_scan(11, (6.0, 2.0))
    b = generate_scan(11, (6.0, 2.0))
    np.testing.assert_array_equal(a.features, b.features)
    np.testing.assert_array_equal(a.labels, b.labels)


def test_zero_spread_fixes_tumor_size():
    a = generate_scan(1, (6.0, 0.0))
    b = generate_scan(2, (6.0, 0.0))
    assert a.tumor_size == b.tumor_size
    centre = lambda s: tuple(np.argwhere(s.labels > 0).mean(axis=0))
    assert centre(a) != centre(b)


@pytest.mark.parametrize("seed", [7] + list(range(20)))
def test_labels_nested(seed):
    scan = generate_scan(seed, (6.0, 2.0), grid_size=32)
    assert nesting_ok(scan.labels)
    assert scan.tumor_size == np.count_nonzero(scan.labels)
    # all three tumour classes present
    assert set(np.unique(scan.labels)) == {0, 1, 2, 3}


def test_nesting_validator_rejects_broken_labels():
    labels = np.zeros((4, 4), dtype=np.int8)
    labels[1, 1] = 3
    assert nesting_ok(labels)


@pytest.mark.parametrize("size_params", [(0.0, 0.0), (-1.0, 0.0), (3.0, 3.0)])
def test_degenerate_radius(size_params):
    with pytest.raises(UsageError):
        generate_scan(0, size_params)


def test_radius_must_fit_grid():
    with pytest.raises(UsageError):
        generate_scan(0, (16.0, 0.0), grid_size=32)


def test_features_carry_class_signal():
    scan = generate_scan(3, (6.0, 2.0))
    for c in range(4):
        mean = scan.features[scan.labels == c].mean(axis=0)
        assert np.argmax(mean) == c


def test_dataset_scan_ids():
    data = generate_dataset(5, seed=3)
    assert [s.scan_id for s in data] == list(range(5))
    again = generate_dataset(5, seed=3)
    assert all(np.array_equal(a.features, b.features) for a, b in zip(data, again))


# ----------------------------------------------------------------- model ----


def test_forward_zero_model_uniform():
    np.testing.assert_allclose(forward(zero_model(), np.array([0.3, -1.0, 2.0, 0.5])), [0.25] * 4, rtol=0, atol=1e-15)


def test_forward_logit_shift_invariance(rng):
    model = random_model(rng)
    t = dict(model.tensors())
    shifted = ParamVector.from_tensors([(k, v + 7.5 if k == "b2" else v) for k, v in t.items()])
    x = rng.normal(size=4)
    np.testing.assert_allclose(forward(model, x), forward(shifted, x), rtol=1e-12, atol=1e-15)


def test_forward_normalised(rng):
    for _ in range(20):
        p = forward(random_model(rng, scale=2.0), rng.normal(size=(10, 4)))
        assert np.all(p > 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_forward_rejects_non_finite():
    values = np.zeros(len(zero_model()))
    values[3] = np.nan
    with pytest.raises(StateError):
        forward(ParamVector(values, model_layout()), np.zeros(4))


def test_loss_zero_model_is_ln4(rng):
    assert loss(zero_model(), random_batch(rng)) == pytest.approx(math.log(4), abs=1e-12)
    assert math.log(4) == pytest.approx(1.386294, abs=1e-6)


def test_loss_saturated_model():
    model = zero_model()
    t = dict(model.tensors())
    t["b2"] = np.array([0.0, 0.0, 50.0, 0.0])
    saturated = ParamVector.from_tensors(list(t.items()))
    batch = (np.ones((5, 4)), np.full(5, 2))
    assert 0 <= loss(saturated, batch) <= 1e-6


def test_loss_duplicate_invariance(rng):
    model = random_model(rng)
    X, y = random_batch(rng)
    assert loss(model, (np.vstack([X, X]), np.concatenate([y, y]))) == pytest.approx(loss(model, (X, y)), rel=1e-14)


def test_loss_accepts_pairs(rng):
    model = random_model(rng)
    X, y = random_batch(rng, 4)
    assert loss(model, list(zip(X, y))) == pytest.approx(loss(model, (X, y)), rel=1e-15)


def test_loss_empty_batch():
    with pytest.raises(UsageError):
        loss(zero_model(), [])
    with pytest.raises(UsageError):
        gradient(zero_model(), [])


def test_gradient_matches_finite_differences(rng):
    for _ in range(5):
        model = random_model(rng, scale=0.7)
        batch = random_batch(rng)
        assert max_relative_error(gradient(model, batch).values, finite_difference(model, batch)) <= 1e-4


def test_gradient_vanishes_at_stationary_point():
    # zero weights + one pixel of each class: softmax is uniform and matches the label mix
    X = np.eye(4)
    y = np.arange(4)
    assert l2_norm(gradient(zero_model(), (X, y))) < 1e-12


def test_gradient_duplicate_invariance(rng):
    model = random_model(rng)
    X, y = random_batch(rng)
    g1 = gradient(model, (X, y))
    g2 = gradient(model, (np.vstack([X, X]), np.concatenate([y, y])))
    np.testing.assert_allclose(g2.values, g1.values, rtol=1e-12, atol=1e-15)


def test_gradient_layout(rng):
    model = random_model(rng)
    assert gradient(model, random_batch(rng)).layout == model.layout


# -------------------------------------------------------------- training ----


@pytest.fixture(scope="module")
def shard():
    return generate_dataset(5, seed=9)


def test_lr_zero_keeps_model(shard):
    model = init_model(0)
    res = local_train(model, shard, TrainConfig(lr=0.0, epochs=3, batch_size=2), rng_seed=1)
    assert not np.any(res.delta.values)
    assert res.tau == 3 * math.ceil(5 / 2)


def test_tau_counting():
    scans = generate_dataset(40, seed=2)
    res = local_train(init_model(0), scans, TrainConfig(lr=0.1, epochs=1, batch_size=8), rng_seed=0)
    assert res.tau == 5
    assert res.n_samples == 40


@pytest.mark.parametrize("n, E, B", [(1, 1, 8), (3, 2, 2), (5, 3, 4), (9, 1, 8), (7, 4, 3)])
def test_tau_formula(n, E, B):
    scans = generate_dataset(n, seed=n)
    res = local_train(init_model(0), scans, TrainConfig(lr=0.05, epochs=E, batch_size=B), rng_seed=n)
    assert res.tau == E * math.ceil(n / min(B, n)) == E * math.ceil(n / B)
    assert len(res.epoch_losses) == E
    assert res.train_loss == res.epoch_losses[-1]


def test_local_train_deterministic(shard):
    cfg = TrainConfig(lr=0.5, epochs=2, batch_size=2)
    a = local_train(init_model(3), shard, cfg, rng_seed=[1, 2, 3])
    b = local_train(init_model(3), shard, cfg, rng_seed=[1, 2, 3])
    assert a.delta == b.delta
    assert a.epoch_losses == b.epoch_losses


def test_delta_sign_convention(shard):
    model = init_model(1)
    res = local_train(model, shard, TrainConfig(lr=0.7, epochs=2, batch_size=2), rng_seed=5)
    assert np.array_equal(model.values - res.delta.values, res.model.values)


def test_single_step_is_gradient_step(shard):
    model = init_model(4)
    cfg = TrainConfig(lr=0.3, epochs=1, batch_size=8, pixels_per_scan=32)
    res = local_train(model, shard, cfg, rng_seed=77)
    # replay the trainer's random draws to rebuild its single batch
    rng = np.random.default_rng(77)
    Xs, ys = [], []
    for scan in shard:
        idx = sample_pixels(scan, cfg.pixels_per_scan, cfg.foreground_fraction, rng)
        Xs.append(scan.features.reshape(-1, 4)[idx])
        ys.append(scan.labels.ravel()[idx])
    order = rng.permutation(len(shard))
    X = np.concatenate([Xs[i] for i in order])
    y = np.concatenate([ys[i] for i in order])
    expected = model.values - cfg.lr * gradient(model, (X, y)).values
    assert res.tau == 1
    np.testing.assert_allclose(res.model.values, expected, rtol=0, atol=1e-15)


def test_sample_pixels_foreground_share(shard):
    rng = np.random.default_rng(0)
    scan = shard[0]
    idx = sample_pixels(scan, 64, 0.5, rng)
    assert len(set(idx.tolist())) == 64
    assert np.count_nonzero(scan.labels.ravel()[idx]) == 32
    idx = sample_pixels(scan, 64, 0.0, rng)
    assert np.count_nonzero(scan.labels.ravel()[idx]) == 0


def test_training_loss_mostly_non_increasing():
    ok = 0
    for seed in range(20):
        scans = generate_dataset(4, seed=100 + seed)
        res = local_train(init_model(seed), scans, TrainConfig(lr=0.5, epochs=6, batch_size=8), rng_seed=seed)
        losses = np.array(res.epoch_losses)
        ok += bool(np.all(np.diff(losses) <= 0))
    assert ok >= 18


def test_divergence_detected(shard):
    with pytest.raises(DivergenceError):
        local_train(init_model(0), shard, TrainConfig(lr=1e9, epochs=5, batch_size=1), rng_seed=0)


def test_empty_shard():
    with pytest.raises(UsageError):
        local_train(init_model(0), [], TrainConfig(lr=0.1), rng_seed=0)
