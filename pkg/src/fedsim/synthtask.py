"""Synthetic stand-in for multi-modal tumour scans and a tiny per-pixel classifier.

Each scan is a ``G x G`` grid with four feature channels. Three concentric
ellipses define the labels: 1 = edema (outer ring), 2 = necrotic core,
3 = enhancing (innermost). Features are a per-class signature plus Gaussian
noise, so a per-pixel classifier can learn the task but never perfectly.

The classifier is a two-layer tanh MLP applied independently to each pixel,
with the backward pass written out by hand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Tuple

import numpy as np

from fedsim.errors import DivergenceError, StateError, UsageError
from fedsim.numerics import Layout, ParamVector

N_FEATURES = 4
N_CLASSES = 4
HIDDEN = 16
NOISE_SIGMA = 0.3
SIGNATURE_SEPARATION = 1.0
TC_SCALE = 0.6
ET_SCALE = 0.3
INIT_SCALE = 0.1
DIVERGENCE_LIMIT = 1e6

# Row c is the mean feature vector of class c.
CLASS_SIGNATURES = SIGNATURE_SEPARATION * np.eye(N_CLASSES, N_FEATURES)


@dataclass(frozen=True, eq=False)
class Scan:
    scan_id: int
    features: np.ndarray  # (G, G, 4) float64
    labels: np.ndarray  # (G, G) int8

    @property
    def grid_size(self) -> int:
        return self.labels.shape[0]

    @property
    def tumor_size(self) -> int:
        return int(np.count_nonzero(self.labels))


def _ellipse_mask(G, cy, cx, a, b, theta):
    yy, xx = np.mgrid[0:G, 0:G].astype(np.float64)
    dy = yy - cy
    dx = xx - cx
    c, s = math.cos(theta), math.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def generate_scan(
    seed: int,
    size_params: Tuple[float, float] = (6.0, 2.0),
    grid_size: int = 32,
    noise: float = NOISE_SIGMA,
    scan_id: int | None = None,
) -> Scan:
    """Generate one scan deterministically from ``seed``.

    ``size_params`` is ``(mean_radius, radius_spread)``: the whole-tumour radius
    is drawn uniformly from ``mean_radius +/- radius_spread`` and the aspect
    ratio jitter scales with ``radius_spread / mean_radius``, so a zero spread
    always yields the same circle (only its integer centre moves).
    """
    mean_radius, spread = (float(x) for x in size_params)
    G = int(grid_size)
    if mean_radius <= 0 or spread < 0 or mean_radius - spread <= 0:
        raise UsageError(f"degenerate tumour radius: mean={mean_radius}, spread={spread}")
    if mean_radius >= G / 2:
        raise UsageError(f"mean_radius {mean_radius} must be < grid_size/2 = {G / 2}")

    rng = np.random.default_rng(seed)
    radius = mean_radius + spread * rng.uniform(-1.0, 1.0)
    aspect = math.exp(0.5 * (spread / mean_radius) * rng.uniform(-1.0, 1.0))
    a, b = radius * aspect, radius / aspect
    theta = rng.uniform(0.0, math.pi)
    reach = int(math.ceil(max(a, b))) + 1
    lo, hi = reach, G - 1 - reach
    if hi < lo:
        lo = hi = G // 2
    cy = int(rng.integers(lo, hi + 1))
    cx = int(rng.integers(lo, hi + 1))

    labels = np.zeros((G, G), dtype=np.int8)
    labels[_ellipse_mask(G, cy, cx, a, b, theta)] = 1
    labels[_ellipse_mask(G, cy, cx, TC_SCALE * a, TC_SCALE * b, theta)] = 2
    labels[_ellipse_mask(G, cy, cx, ET_SCALE * a, ET_SCALE * b, theta)] = 3

    features = CLASS_SIGNATURES[labels] + noise * rng.standard_normal((G, G, N_FEATURES))
    return Scan(scan_id=seed if scan_id is None else scan_id, features=features, labels=labels)


def generate_dataset(n_scans: int, seed: int, size_params=(6.0, 2.0), grid_size=32, noise=NOISE_SIGMA):
    scans = []
    for i in range(n_scans):
        scan_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        scans.append(generate_scan(scan_seed, size_params, grid_size, noise, scan_id=i))
    return scans


def nesting_ok(labels: np.ndarray) -> bool:
    """ET inside TC inside WT, and every non-background pixel in WT."""
    et = labels == 3
    tc = (labels == 2) | et
    wt = labels > 0
    return bool(np.all(tc[et]) and np.all(wt[tc]))


# ---------------------------------------------------------------- model ----


def model_layout(hidden: int = HIDDEN) -> Layout:
    return (
        ("W1", (N_FEATURES, hidden)),
        ("b1", (hidden,)),
        ("W2", (hidden, N_CLASSES)),
        ("b2", (N_CLASSES,)),
    )


def init_model(seed: int, hidden: int = HIDDEN) -> ParamVector:
    layout = model_layout(hidden)
    rng = np.random.default_rng([seed, 0x1A17])
    n = sum(math.prod(s) for _, s in layout)
    return ParamVector(rng.uniform(-INIT_SCALE, INIT_SCALE, size=n), layout)


def _log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _require_finite(model: ParamVector):
    if not model.is_finite():
        raise StateError("model contains non-finite parameters")


def _forward(model, X):
    p = model.tensors()
    h = np.tanh(X @ p["W1"] + p["b1"])
    return h, _log_softmax(h @ p["W2"] + p["b2"])


def forward(model: ParamVector, features: np.ndarray) -> np.ndarray:
    """Class probabilities for one feature vector or an ``(..., 4)`` array."""
    _require_finite(model)
    X = np.asarray(features, dtype=np.float64)
    shape = X.shape
    _, logp = _forward(model, X.reshape(-1, N_FEATURES))
    return np.exp(logp).reshape(shape[:-1] + (N_CLASSES,))


def _batch_arrays(batch):
    if isinstance(batch, tuple) and len(batch) == 2 and isinstance(batch[0], np.ndarray):
        X, y = batch
    else:
        batch = list(batch)
        if not batch:
            raise UsageError("batch is empty")
        X = np.array([f for f, _ in batch], dtype=np.float64)
        y = np.array([l for _, l in batch], dtype=np.int64)
    X = np.asarray(X, dtype=np.float64).reshape(-1, N_FEATURES)
    y = np.asarray(y, dtype=np.int64).ravel()
    if y.size == 0:
        raise UsageError("batch is empty")
    return X, y


def loss(model: ParamVector, batch) -> float:
    """Mean cross-entropy. ``batch`` is ``(X, y)`` arrays or an iterable of ``(feature, label)``."""
    _require_finite(model)
    X, y = _batch_arrays(batch)
    _, logp = _forward(model, X)
    return float(-np.mean(logp[np.arange(y.size), y]))


def _loss_and_gradient(model, X, y):
    p = model.tensors()
    h, logp = _forward(model, X)
    n = y.size
    value = float(-np.mean(logp[np.arange(n), y]))

    dlogits = np.exp(logp)
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    dW2 = h.T @ dlogits
    db2 = dlogits.sum(axis=0)
    dz = (dlogits @ p["W2"].T) * (1.0 - h * h)
    dW1 = X.T @ dz
    db1 = dz.sum(axis=0)
    grad = ParamVector(
        np.concatenate([dW1.ravel(), db1, dW2.ravel(), db2]), model.layout
    )
    return value, grad


def gradient(model: ParamVector, batch) -> ParamVector:
    """Exact gradient of :func:`loss` with respect to every parameter."""
    _require_finite(model)
    X, y = _batch_arrays(batch)
    return _loss_and_gradient(model, X, y)[1]


def predict_labels(model: ParamVector, scan: Scan) -> np.ndarray:
    _require_finite(model)
    _, logp = _forward(model, scan.features.reshape(-1, N_FEATURES))
    return logp.argmax(axis=-1).reshape(scan.labels.shape).astype(np.int8)


def scan_loss(model: ParamVector, scan: Scan) -> float:
    return loss(model, (scan.features, scan.labels))


# ------------------------------------------------------------- training ----


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    epochs: int = 1
    batch_size: int = 8
    pixels_per_scan: int = 64
    foreground_fraction: float = 0.5

    def __post_init__(self):
        if not self.lr >= 0:
            raise UsageError(f"lr must be >= 0, got {self.lr}")
        if self.epochs < 1 or self.batch_size < 1 or self.pixels_per_scan < 1:
            raise UsageError("epochs, batch_size and pixels_per_scan must be >= 1")
        if not 0.0 <= self.foreground_fraction <= 1.0:
            raise UsageError("foreground_fraction must be in [0, 1]")


def sample_pixels(scan: Scan, count: int, foreground_fraction: float, rng) -> np.ndarray:
    """Flat pixel indices: up to ``foreground_fraction * count`` from the tumour,
    the rest from anywhere else, all without replacement."""
    flat = scan.labels.ravel()
    count = min(count, flat.size)
    fg = np.flatnonzero(flat)
    bg = np.flatnonzero(flat == 0)
    n_fg = min(int(round(foreground_fraction * count)), fg.size)
    n_bg = min(count - n_fg, bg.size)
    n_fg = count - n_bg
    picked = np.concatenate([rng.choice(fg, size=n_fg, replace=False), rng.choice(bg, size=n_bg, replace=False)])
    return picked


@dataclass(frozen=True)
class TrainResult:
    """Raw product of :func:`local_train`; the engine wraps it into an ``Update``."""

    delta: ParamVector
    tau: int
    n_samples: int
    train_loss: float
    epoch_losses: Tuple[float, ...] = field(default=())
    model: ParamVector | None = None


def local_train(
    model: ParamVector, shard: Sequence[Scan], cfg: TrainConfig, rng_seed
) -> TrainResult:
    """Mini-batch SGD over a shard, starting from ``model``.

    Each scan contributes a fixed random subsample of ``cfg.pixels_per_scan``
    pixels (drawn once per call, tumour pixels oversampled per
    ``cfg.foreground_fraction``). An epoch shuffles the scans and steps once per
    group of ``batch_size`` scans, so ``tau == epochs * ceil(n_scans / batch_size)``.
    ``lr == 0`` is accepted and leaves the model untouched.
    """
    shard = list(shard)
    if not shard:
        raise UsageError("local_train needs a non-empty shard")
    _require_finite(model)
    rng = np.random.default_rng(rng_seed)
    n = len(shard)
    B = min(cfg.batch_size, n)

    Xs, ys = [], []
    for scan in shard:
        idx = sample_pixels(scan, cfg.pixels_per_scan, cfg.foreground_fraction, rng)
        Xs.append(scan.features.reshape(-1, N_FEATURES)[idx])
        ys.append(scan.labels.ravel()[idx].astype(np.int64))

    values = model.values.copy()
    layout = model.layout
    tau = 0
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, B):
            members = order[start : start + B]
            X = np.concatenate([Xs[i] for i in members])
            y = np.concatenate([ys[i] for i in members])
            value, grad = _loss_and_gradient(ParamVector(values, layout), X, y)
            if not math.isfinite(value) or value > DIVERGENCE_LIMIT:
                raise DivergenceError(f"local loss diverged ({value})")
            values = values - cfg.lr * grad.values
            if not np.all(np.isfinite(values)):
                raise DivergenceError("local parameters became non-finite")
            batch_losses.append(value)
            tau += 1
        epoch_losses.append(float(np.mean(batch_losses)))

    delta = ParamVector(model.values - values, layout)
    # Recompute the end point from delta so that start - delta == end bit for bit.
    end = ParamVector(model.values - delta.values, layout)
    return TrainResult(
        delta=delta,
        tau=tau,
        n_samples=n,
        train_loss=epoch_losses[-1],
        epoch_losses=tuple(epoch_losses),
        model=end,
    )
