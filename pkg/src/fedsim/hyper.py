"""Per-round learning-rate and local-epoch policies."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Tuple

from fedsim.errors import ConfigError, StateError

CONSTANT_LR = 0.00005
CONSTANT_EPOCHS = 1
PLATEAU_LR = 0.0002
PLATEAU_PATIENCE = 15
PLATEAU_DECAY = 0.5
ADAPTIVE_E0 = 8

POLICIES = ("constant", "lr_plateau", "adaptive_epoch", "adaptive_epoch+lr_plateau")


@dataclass(frozen=True)
class HyperDecision:
    lr: float
    epochs_per_round: int


def constant_policy(lr: float = CONSTANT_LR, epochs: int = CONSTANT_EPOCHS) -> HyperDecision:
    return HyperDecision(lr, epochs)


@dataclass(frozen=True)
class PlateauState:
    current_lr: float
    patience: int = PLATEAU_PATIENCE
    decay_factor: float = PLATEAU_DECAY
    best_metric: float = -math.inf
    rounds_since_improvement: int = 0

    def __post_init__(self):
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError(f"decay_factor must be in (0, 1), got {self.decay_factor}")


def plateau_step(state: PlateauState, current_mean_dice: float) -> Tuple[PlateauState, float]:
    """Track the metric; after ``patience`` rounds without a strict improvement,
    scale the learning rate by ``decay_factor`` and restart the count.

    The first observation always counts as an improvement over ``-inf``.
    """
    if current_mean_dice > state.best_metric:
        new = replace(state, best_metric=current_mean_dice, rounds_since_improvement=0)
    else:
        since = state.rounds_since_improvement + 1
        if since >= state.patience:
            new = replace(state, current_lr=state.current_lr * state.decay_factor, rounds_since_improvement=0)
        else:
            new = replace(state, rounds_since_improvement=since)
    return new, new.current_lr


def adaptive_epoch(F0: float, Ft: float, E0: int) -> int:
    """``ceil(sqrt(Ft / F0) * E0)`` clamped to ``[1, E0]``."""
    if not F0 > 0:
        raise StateError(f"initial loss must be positive, got {F0}")
    if E0 < 1:
        raise ConfigError(f"E0 must be >= 1, got {E0}")
    if Ft < 0:
        raise StateError(f"loss must be non-negative, got {Ft}")
    epochs = math.ceil(math.sqrt(Ft / F0) * E0)
    return min(max(epochs, 1), E0)


def combined_policy(
    plateau: PlateauState, F0: Optional[float], Ft: Optional[float], E0: int, current_mean_dice: Optional[float]
) -> Tuple[HyperDecision, PlateauState]:
    """Learning rate from the plateau tracker and epochs from the loss ratio.

    Pass ``None`` for the loss/metric before any round has finished.
    """
    if current_mean_dice is not None:
        plateau, _ = plateau_step(plateau, current_mean_dice)
    epochs = E0 if F0 is None or Ft is None else adaptive_epoch(F0, Ft, E0)
    return HyperDecision(plateau.current_lr, epochs), plateau


class HyperSchedule:
    """Engine-facing policy object: ask :meth:`decision`, then :meth:`observe` the round."""

    def __init__(
        self,
        name: str,
        lr0: Optional[float] = None,
        patience: int = PLATEAU_PATIENCE,
        decay_factor: float = PLATEAU_DECAY,
        e0: int = ADAPTIVE_E0,
        epochs: int = CONSTANT_EPOCHS,
    ):
        if name not in POLICIES:
            raise ConfigError(f"unknown hyper policy {name!r}; expected one of {', '.join(POLICIES)}")
        self.name = name
        self.uses_plateau = "lr_plateau" in name
        self.uses_adaptive = name.startswith("adaptive_epoch")
        if lr0 is None:
            lr0 = PLATEAU_LR if self.uses_plateau else CONSTANT_LR
        if not lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {lr0}")
        if e0 < 1 or epochs < 1:
            raise ConfigError("epoch counts must be >= 1")
        self.lr0 = float(lr0)
        self.e0 = int(e0)
        self.epochs = int(epochs)
        self.plateau = PlateauState(self.lr0, patience, decay_factor) if self.uses_plateau else None
        self.initial_loss: Optional[float] = None
        self.last_loss: Optional[float] = None

    def decision(self) -> HyperDecision:
        lr = self.plateau.current_lr if self.plateau is not None else self.lr0
        if not self.uses_adaptive:
            return HyperDecision(lr, self.epochs)
        if self.initial_loss is None:
            return HyperDecision(lr, self.e0)
        return HyperDecision(lr, adaptive_epoch(self.initial_loss, self.last_loss, self.e0))

    def observe(self, mean_dice: float, round_loss: float):
        if self.plateau is not None:
            self.plateau, _ = plateau_step(self.plateau, mean_dice)
        if self.initial_loss is None:
            self.initial_loss = float(round_loss)
        self.last_loss = float(round_loss)
