"""Run configuration: dataclasses, strict JSON parsing and serialization.

Configs are JSON files validated against ``schema/config.schema.json``
(shipped with the package). Unknown keys are rejected. A file with a
top-level ``"base"`` key is an experiment config (search, comparison, sweep,
...) wrapping a training config; anything else is a training config.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import jsonschema

from .data import AugmentConfig
from .errors import ConfigError
from .optim import OptimizerConfig
from .population import PopulationGradSpec


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synth"
    train_subset: int | None = None
    test_subset: int | None = None
    subset_seed: int = 0
    # synth only
    classes: int = 4
    per_class: int = 50
    test_per_class: int = 25
    dim: int = 16
    spread: float = 0.15
    synth_seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "mlp"  # mlp | linear | miniconv
    hidden: tuple = (256,)
    channels: tuple = (8, 16)
    head: int = 64
    width_multiplier: float = 1.0


@dataclass(frozen=True)
class LRDecayConfig:
    n_eras: int = 2
    era_decay: float = 0.5


@dataclass(frozen=True)
class DropoutConfig:
    dropout_first: float = 0.0
    dropout_last: float = 0.0


@dataclass(frozen=True)
class L1Config:
    l1_first: float = 0.0
    l1_last: float = 0.0


@dataclass(frozen=True)
class L2Config:
    l2_first: float = 0.0
    l2_last: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    batch_size: int = 128
    epochs: int = 100
    seed: int = 0
    popgrad: PopulationGradSpec | None = None
    lr_decay: LRDecayConfig | None = None
    dropout: DropoutConfig | None = None
    l1: L1Config | None = None
    l2: L2Config | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr_decay is not None:
            if not 1 <= self.lr_decay.n_eras <= self.epochs:
                raise ConfigError(f"lr_decay.n_eras must lie in 1..epochs ({self.epochs})")
            if not 0 < self.lr_decay.era_decay <= 1:
                raise ConfigError("lr_decay.era_decay must lie in (0, 1]")
        if self.dropout is not None:
            for v in (self.dropout.dropout_first, self.dropout.dropout_last):
                if not 0 <= v < 1:
                    raise ConfigError("dropout probabilities must lie in [0, 1)")


_BLOCKS = {
    "dataset": DatasetConfig, "model": ModelConfig, "optimizer": OptimizerConfig,
    "augment": AugmentConfig, "popgrad": PopulationGradSpec, "lr_decay": LRDecayConfig,
    "dropout": DropoutConfig, "l1": L1Config, "l2": L2Config,
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Wrapper for every multi-run subcommand; irrelevant fields are ignored."""

    base: TrainConfig = field(default_factory=TrainConfig)
    grid: dict | None = None  # tune: axis name -> values
    n_draws: int = 10
    methods: tuple = ("pg",)
    meta_grids: dict | None = None  # method -> [values1, values2]
    pg: PopulationGradSpec | None = None  # combine/long: fixed PG setting
    window: int = 20
    multipliers: tuple = (1.0, 1.5, 2.0, 2.5, 3.0, 3.5)
    pg_grid: dict | None = None  # widths: {"population_size": [...], "population_range": [...]}
    subset_size: int = 32
    repeats: int = 10
    checkpoint: str | None = None
    slice: dict | None = None


# ---------------------------------------------------------------------------


def _schema():
    text = resources.files("popgrad").joinpath("schema/config.schema.json").read_text()
    return json.loads(text)


def _errors(instance, ref):
    schema = _schema()
    validator = jsonschema.Draft202012Validator({"$ref": f"#/$defs/{ref}", "$defs": schema["$defs"]})
    return sorted(validator.iter_errors(instance), key=lambda e: list(e.absolute_path))


def _describe(errors):
    lines = []
    for err in errors:
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        if err.validator == "additionalProperties":
            allowed = set(err.schema.get("properties", {}))
            bad = sorted(set(err.instance) - allowed)
            lines.append(f"{where}: unknown key(s) {', '.join(repr(b) for b in bad)}")
        else:
            lines.append(f"{where}: {err.message}")
    return lines


def _validate(instance, ref):
    errs = _errors(instance, ref)
    if errs:
        raise ConfigError("config schema violation:\n  " + "\n  ".join(_describe(errs)))


def _block(cls, value):
    if value is None:
        return None
    if cls is ModelConfig and isinstance(value, str):
        value = {"kind": value}
    if cls is DatasetConfig and isinstance(value, str):
        value = {"name": value}
    kwargs = dict(value)
    for f in fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list):
            kwargs[f.name] = tuple(kwargs[f.name])
    return cls(**kwargs)


def train_config_from_dict(d):
    _validate(d, "train")
    kwargs = {}
    for key, value in d.items():
        kwargs[key] = _block(_BLOCKS[key], value) if key in _BLOCKS else value
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:  # pragma: no cover - schema should catch this
        raise ConfigError(str(exc)) from exc


def experiment_config_from_dict(d):
    _validate(d, "experiment")
    kwargs = dict(d)
    kwargs["base"] = train_config_from_dict(d["base"])
    if "pg" in kwargs:
        kwargs["pg"] = _block(PopulationGradSpec, kwargs["pg"])
    for key in ("methods", "multipliers"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return ExperimentConfig(**kwargs)


def config_from_dict(d):
    if isinstance(d, dict) and "base" in d:
        return experiment_config_from_dict(d)
    return train_config_from_dict(d)


def parse_config(path):
    """Load and validate a JSON config file.

    Returns a :class:`TrainConfig` or an :class:`ExperimentConfig`. JSON syntax
    errors are reported with line and column; schema violations list every
    offending key.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        return config_from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _plain(obj):
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_plain(v) for v in obj]
    return obj


def _train_dict(cfg):
    return {k: _plain(v) for k, v in asdict(cfg).items() if v is not None}


def config_to_dict(cfg):
    """Full JSON-ready dict (defaults included); parses back to an equal config."""
    if isinstance(cfg, TrainConfig):
        return _train_dict(cfg)
    d = {k: _plain(v) for k, v in asdict(cfg).items() if v is not None and k != "base"}
    d["base"] = _train_dict(cfg.base)
    return d


def dump_config(cfg, path=None):
    text = json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
    if path is not None:
        Path(path).write_text(text + "\n")
    return text


def with_updates(cfg, **blocks):
    """``replace`` that accepts ``block__field=value`` for nested blocks."""
    nested = {}
    flat = {}
    for key, value in blocks.items():
        if "__" in key:
            block, name = key.split("__", 1)
            nested.setdefault(block, {})[name] = value
        else:
            flat[key] = value
    for block, updates in nested.items():
        current = getattr(cfg, block)
        if current is None:
            current = _BLOCKS[block]()
        flat[block] = replace(current, **updates)
    return replace(cfg, **flat)
