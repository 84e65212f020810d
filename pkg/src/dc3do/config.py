"""Experiment configuration: one YAML (or JSON) file plus ``--set`` overrides.

Unknown keys are rejected at every level, and all values are validated
before any command does work.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .geom import CLASS_NAMES


class ConfigError(ValueError):
    pass


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class DatasetConfig:
    classes: list = field(default_factory=lambda: [0, 1, 2])
    train_per_class: int = 200
    test_per_class: int = 50
    n_points: int = 2048

    def __post_init__(self):
        _require(isinstance(self.classes, list) and len(self.classes) >= 2, "dataset.classes needs at least two labels")
        _require(all(c in CLASS_NAMES for c in self.classes), f"dataset.classes must be drawn from {sorted(CLASS_NAMES)}")
        _require(len(set(self.classes)) == len(self.classes), "dataset.classes has duplicates")
        _require(self.train_per_class >= 1 and self.test_per_class >= 0, "per-class counts must be positive")
        _require(self.n_points >= 1, "dataset.n_points must be >= 1")


@dataclass(frozen=True)
class ModelConfig:
    d_z: int = 32
    hidden: int = 128
    enc_hidden: int = 64
    d_e: int = 16
    d_t: int = 16
    complements: bool = True

    def __post_init__(self):
        _require(min(self.d_z, self.hidden, self.enc_hidden, self.d_e, self.d_t) >= 1, "model dims must be >= 1")
        _require(self.d_t % 2 == 0, "model.d_t must be even")


@dataclass(frozen=True)
class ScheduleConfig:
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02

    def __post_init__(self):
        _require(self.T >= 1, "schedule.T must be >= 1")
        _require(0 < self.beta_min <= self.beta_max < 1, "need 0 < beta_min <= beta_max < 1")


@dataclass(frozen=True)
class TrainSection:
    steps: int = 4000
    batch_size: int = 128
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    log_every: int = 100
    complement_prob: float = 0.5
    encoder_mode: str = "frozen"
    lr_decay: str = "cosine"

    def __post_init__(self):
        _require(self.encoder_mode in ("frozen", "joint"), "train.encoder_mode must be 'frozen' or 'joint'")
        _require(self.steps >= 1 and self.batch_size >= 1 and self.log_every >= 1, "train counts must be >= 1")
        _require(self.learning_rate > 0, "train.learning_rate must be > 0")
        _require(0 <= self.beta1 < 1 and 0 <= self.beta2 < 1, "train.beta1/beta2 must be in [0, 1)")
        _require(0 <= self.complement_prob <= 1, "train.complement_prob must be in [0, 1]")
        _require(self.lr_decay in ("constant", "cosine"), "train.lr_decay must be 'constant' or 'cosine'")


@dataclass(frozen=True)
class ClassifyConfig:
    n_trials: int = 64
    # list of [trials, keep] stages; replaces n_trials when set
    adaptive: list | None = None
    candidates: list | None = None
    mode: str = "both"
    prior: list | None = None

    def __post_init__(self):
        _require(self.n_trials >= 1, "classify.n_trials must be >= 1")
        _require(self.mode in ("multiclass", "binary", "both"), "classify.mode must be multiclass, binary or both")
        if self.candidates is not None:
            _require(len(self.candidates) >= 2, "classify.candidates needs at least two classes")
        if self.adaptive is not None:
            from .classify import check_stage_schedule

            try:
                check_stage_schedule(self.adaptive)
            except (ValueError, TypeError) as err:
                raise ConfigError(f"classify.adaptive: {err}") from None


@dataclass(frozen=True)
class ViewsConfig:
    n_views: int = 36
    frontal_only: bool = True
    size: int = 64
    elevation: float = 20.0
    point_radius: float | None = None
    hidden: int = 128
    train_steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 1e-3
    lr_decay: str = "cosine"
    train_objects_per_class: int = 200
    eval_objects_per_class: int = 20
    n_trials: int = 32
    grid_sizes: list = field(default_factory=lambda: [16, 32, 64])
    grid_views: list = field(default_factory=lambda: [1, 6])

    def __post_init__(self):
        from .views import MIN_SIZE

        _require(self.n_views >= 1, "views.n_views must be >= 1")
        _require(self.lr_decay in ("constant", "cosine"), "views.lr_decay must be 'constant' or 'cosine'")
        _require(self.size >= MIN_SIZE, f"views.size must be >= {MIN_SIZE}")
        _require(bool(self.grid_sizes) and bool(self.grid_views), "views.grid_sizes and views.grid_views must be non-empty")
        _require(all(s >= MIN_SIZE for s in self.grid_sizes), f"grid sizes must be >= {MIN_SIZE}")
        _require(all(n >= 1 for n in self.grid_views), "grid view counts must be >= 1")
        _require(min(self.train_steps, self.batch_size, self.train_objects_per_class, self.eval_objects_per_class, self.n_trials) >= 1,
                 "views training/eval counts must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainSection = field(default_factory=TrainSection)
    classify: ClassifyConfig = field(default_factory=ClassifyConfig)
    views: ViewsConfig = field(default_factory=ViewsConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def out(self) -> Path:
        return Path(self.output_dir)


_SECTION_TYPES = {
    "dataset": DatasetConfig, "model": ModelConfig, "schedule": ScheduleConfig,
    "train": TrainSection, "classify": ClassifyConfig, "views": ViewsConfig,
}


def _coerce(value, default, where):
    if isinstance(default, bool):
        _require(isinstance(value, bool), f"{where} must be true/false")
    elif isinstance(default, int) and not isinstance(default, bool):
        _require(isinstance(value, int) and not isinstance(value, bool), f"{where} must be an integer")
    elif isinstance(default, float):
        _require(isinstance(value, (int, float)) and not isinstance(value, bool), f"{where} must be a number")
        value = float(value)
    elif isinstance(default, str):
        _require(isinstance(value, str), f"{where} must be a string")
    return value


def _build(cls, data: dict, where: str):
    _require(isinstance(data, dict), f"{where or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    _require(not unknown, f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        key = f"{where}.{name}" if where else name
        if name in _SECTION_TYPES and cls is ExperimentConfig:
            kwargs[name] = _build(_SECTION_TYPES[name], value or {}, key)
        else:
            kwargs[name] = _coerce(value, getattr(defaults, name), key)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where or 'config'}: {err}") from None


def apply_override(data: dict, assignment: str) -> None:
    """Apply ``a.b=value`` to a nested dict; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    _require(bool(sep) and bool(key), f"override {assignment!r} is not key=value")
    parts = key.strip().split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        _require(isinstance(node, dict), f"override {key!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(raw)


def config_from_dict(data: dict, overrides=()) -> ExperimentConfig:
    data = json.loads(json.dumps(data or {}))
    for item in overrides:
        apply_override(data, item)
    return _build(ExperimentConfig, data, "")


def load_config(path=None, overrides=()) -> ExperimentConfig:
    data = {}
    if path is not None:
        path = Path(path)
        _require(path.exists(), f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"cannot parse {path}: {err}") from None
    return config_from_dict(data, overrides)
