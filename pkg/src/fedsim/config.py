"""Experiment configuration: JSON parsing, validation, canonical hashing."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from fedsim.aggregation import AGGREGATORS, DEFAULT_BETA
from fedsim.errors import ConfigError
from fedsim.hyper import ADAPTIVE_E0, CONSTANT_EPOCHS, PLATEAU_DECAY, PLATEAU_PATIENCE, POLICIES
from fedsim.partition import PartitionSpec, default_proportions
from fedsim.selection import SELECTORS

TOP_LEVEL_KEYS = ("seed", "rounds", "dataset", "partition", "aggregator", "selector", "hyper", "time_model", "output")
DEFAULT_ROUNDS = 70
# Plain SGD on the small per-pixel MLP needs far larger steps than the nominal policy
# rates assume; this maps them (5e-5 constant, 2e-4 plateau) to 1.0 and 4.0.
DESK_LR_SCALE = 20000.0


@dataclass(frozen=True)
class DatasetConfig:
    n_scans: int = 341
    grid_size: int = 32
    mean_radius: float = 6.0
    radius_spread: float = 2.0
    noise: float = 0.3
    pixels_per_scan: int = 64
    foreground_fraction: float = 0.5
    batch_size: int = 8
    hidden: int = 16


@dataclass(frozen=True)
class AggregatorConfig:
    name: str = "fedavgm"
    beta: float = DEFAULT_BETA
    # None means 1 for fedavgm and sum(p_i^2) for fednova_reduced.
    gamma: Optional[float] = None


@dataclass(frozen=True)
class SelectorConfig:
    name: str = "all"
    k: Optional[int] = None


@dataclass(frozen=True)
class HyperConfig:
    name: str = "constant"
    lr0: Optional[float] = None
    patience: int = PLATEAU_PATIENCE
    decay_factor: float = PLATEAU_DECAY
    e0: int = ADAPTIVE_E0
    epochs: int = CONSTANT_EPOCHS
    # Multiplies every learning rate the policy emits before it reaches SGD.
    lr_scale: float = 1.0


@dataclass(frozen=True)
class TimeModel:
    comm_overhead: float = 1.0
    step_cost: float = 0.1
    agg_cost: float = 0.1
    default_speed: float = 1.0
    speed_factors: Tuple[Tuple[str, float], ...] = ()

    def speed(self, collaborator_id: str) -> float:
        return dict(self.speed_factors).get(collaborator_id, self.default_speed)


@dataclass(frozen=True)
class OutputConfig:
    dir: Optional[str] = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    rounds: int = DEFAULT_ROUNDS
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    partition: PartitionSpec = field(default_factory=lambda: PartitionSpec(artificial=True))
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    hyper: HyperConfig = field(default_factory=HyperConfig)
    time_model: TimeModel = field(default_factory=TimeModel)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        validate(self)

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        data = self.to_dict()
        for key, value in kwargs.items():
            if value is None:
                continue
            section, _, sub = key.partition(".")
            if sub:
                data[section][sub] = value
            else:
                data[key] = value
        return from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["partition"]["proportions"] = list(self.partition.proportions)
        data["time_model"]["speed_factors"] = dict(self.time_model.speed_factors)
        return data

    def config_hash(self) -> str:
        return canonical_hash(self.to_dict())


def canonical_hash(data: Dict[str, Any]) -> str:
    blob = json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _strip_comments(obj):
    """Drop keys starting with ``_`` (used as comments) at any depth."""
    if isinstance(obj, dict):
        return {k: _strip_comments(v) for k, v in obj.items() if not str(k).startswith("_")}
    return obj


def _section(cls, raw, where: str, renames=None):
    if raw is None:
        return cls()
    if isinstance(raw, str) and "name" in {f.name for f in fields(cls)}:
        raw = {"name": raw}
    if not isinstance(raw, dict):
        raise ConfigError(f"config key '{where}' must be an object")
    allowed = {f.name for f in fields(cls)}
    renames = renames or {}
    kwargs = {}
    for key, value in raw.items():
        name = renames.get(key, key)
        if name not in allowed:
            raise ConfigError(f"unknown config key '{where}.{key}'")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad value in '{where}': {exc}") from exc


def from_dict(raw: Dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = _strip_comments(raw)
    for key in raw:
        if key not in TOP_LEVEL_KEYS:
            raise ConfigError(f"unknown config key '{key}'")

    partition_raw = dict(raw.get("partition") or {})
    if partition_raw.get("proportions") is None:
        partition_raw.pop("proportions", None)
    else:
        partition_raw["proportions"] = tuple(partition_raw["proportions"])
    time_raw = dict(raw.get("time_model") or {})
    if "speed_factors" in time_raw:
        speeds = time_raw["speed_factors"] or {}
        if not isinstance(speeds, dict):
            raise ConfigError("'time_model.speed_factors' must map collaborator ids to numbers")
        time_raw["speed_factors"] = tuple(sorted((str(k), float(v)) for k, v in speeds.items()))

    kwargs = dict(
        dataset=_section(DatasetConfig, raw.get("dataset"), "dataset"),
        partition=_section(PartitionSpec, partition_raw, "partition", {"bins": "artificial_bins"}),
        aggregator=_section(AggregatorConfig, raw.get("aggregator"), "aggregator"),
        selector=_section(SelectorConfig, raw.get("selector"), "selector"),
        hyper=_section(HyperConfig, raw.get("hyper"), "hyper"),
        time_model=_section(TimeModel, time_raw, "time_model"),
        output=_section(OutputConfig, raw.get("output"), "output"),
    )
    if "seed" in raw:
        kwargs["seed"] = raw["seed"]
    if "rounds" in raw:
        kwargs["rounds"] = raw["rounds"]
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return from_dict(raw)


def _int(value, where, minimum):
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"config key '{where}' must be an integer >= {minimum}, got {value!r}")


def _positive(value, where):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
        raise ConfigError(f"config key '{where}' must be a number > 0, got {value!r}")


def validate(cfg: ExperimentConfig):
    _int(cfg.seed, "seed", 0)
    _int(cfg.rounds, "rounds", 1)
    d = cfg.dataset
    _int(d.n_scans, "dataset.n_scans", 2)
    _int(d.grid_size, "dataset.grid_size", 4)
    _int(d.pixels_per_scan, "dataset.pixels_per_scan", 1)
    _int(d.batch_size, "dataset.batch_size", 1)
    _int(d.hidden, "dataset.hidden", 1)
    _positive(d.mean_radius, "dataset.mean_radius")
    if d.radius_spread < 0 or d.radius_spread >= d.mean_radius:
        raise ConfigError("config key 'dataset.radius_spread' must be in [0, mean_radius)")
    if d.mean_radius >= d.grid_size / 2:
        raise ConfigError("config key 'dataset.mean_radius' must be < grid_size / 2")
    if not 0 <= d.foreground_fraction <= 1:
        raise ConfigError("config key 'dataset.foreground_fraction' must be in [0, 1]")
    if d.noise < 0:
        raise ConfigError("config key 'dataset.noise' must be >= 0")
    if cfg.aggregator.name not in AGGREGATORS:
        raise ConfigError(
            f"unknown aggregator '{cfg.aggregator.name}' (config key 'aggregator'); "
            f"expected one of {', '.join(AGGREGATORS)}"
        )
    if not 0 <= cfg.aggregator.beta < 1:
        raise ConfigError("config key 'aggregator.beta' must be in [0, 1)")
    if cfg.aggregator.gamma is not None:
        _positive(cfg.aggregator.gamma, "aggregator.gamma")
    if cfg.selector.name not in SELECTORS:
        raise ConfigError(
            f"unknown selector '{cfg.selector.name}' (config key 'selector'); expected one of {', '.join(SELECTORS)}"
        )
    if cfg.selector.k is not None:
        _int(cfg.selector.k, "selector.k", 1)
    h = cfg.hyper
    if h.name not in POLICIES:
        raise ConfigError(f"unknown hyper policy '{h.name}' (config key 'hyper'); expected one of {', '.join(POLICIES)}")
    if h.lr0 is not None:
        _positive(h.lr0, "hyper.lr0")
    _int(h.patience, "hyper.patience", 1)
    _int(h.e0, "hyper.e0", 1)
    _int(h.epochs, "hyper.epochs", 1)
    if not 0 < h.decay_factor < 1:
        raise ConfigError("config key 'hyper.decay_factor' must be in (0, 1)")
    _positive(h.lr_scale, "hyper.lr_scale")
    t = cfg.time_model
    for name in ("comm_overhead", "step_cost", "agg_cost", "default_speed"):
        _positive(getattr(t, name), f"time_model.{name}")
    for cid, speed in t.speed_factors:
        _positive(speed, f"time_model.speed_factors.{cid}")


def desk_profile(**overrides) -> ExperimentConfig:
    """Small, fast profile: 40 scans on 32x32 grids, 14 institutions, 30 rounds."""
    cfg = ExperimentConfig(
        seed=0,
        rounds=30,
        dataset=DatasetConfig(n_scans=40, grid_size=32),
        partition=PartitionSpec(proportions=default_proportions(), artificial=False),
        aggregator=AggregatorConfig(name="fedavg"),
        hyper=HyperConfig(name="constant", lr_scale=DESK_LR_SCALE),
    )
    return cfg.with_overrides(**overrides) if overrides else cfg

