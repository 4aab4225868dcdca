"""The experiment configuration document: one JSON file with benchmark,
experiment, and augment sections. Loading is strict — every field must be
present and unknown fields are rejected by name — so a config file is a
complete reproducibility record. `shedd generate --print-defaults` emits the
full default document."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields

from .augment import AugmentConfig
from .data import SyntheticBenchConfig
from .errors import ConfigError
from .losses import Toggles
from .trainer import ExperimentConfig

# derived from the dataset manifest at training time, not configured
_EXCLUDED = {("augment", "value_range")}


@dataclass
class RunConfig:
    benchmark: SyntheticBenchConfig
    experiment: ExperimentConfig
    augment: AugmentConfig


def default_config() -> RunConfig:
    return RunConfig(benchmark=SyntheticBenchConfig(),
                     experiment=ExperimentConfig(),
                     augment=AugmentConfig())


def _section_to_dict(section, obj):
    out = {}
    for f in fields(obj):
        if (section, f.name) in _EXCLUDED:
            continue
        value = getattr(obj, f.name)
        if isinstance(value, Toggles):
            value = value.as_dict()
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def config_to_dict(cfg: RunConfig) -> dict:
    return {"benchmark": _section_to_dict("benchmark", cfg.benchmark),
            "experiment": _section_to_dict("experiment", cfg.experiment),
            "augment": _section_to_dict("augment", cfg.augment)}


def _section_from_dict(section, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section '{section}' must be an object")
    expected = {f.name for f in fields(cls) if (section, f.name) not in _EXCLUDED}
    unknown = set(raw) - expected
    if unknown:
        raise ConfigError(f"unknown config field '{section}.{sorted(unknown)[0]}'")
    missing = expected - set(raw)
    if missing:
        raise ConfigError(f"missing config field '{section}.{sorted(missing)[0]}'")
    values = dict(raw)
    if "toggles" in values:
        toggle_fields = {f.name for f in fields(Toggles)}
        raw_t = values["toggles"]
        if not isinstance(raw_t, dict):
            raise ConfigError("'experiment.toggles' must be an object")
        bad = set(raw_t) - toggle_fields
        if bad:
            raise ConfigError(f"unknown config field 'experiment.toggles.{sorted(bad)[0]}'")
        gone = toggle_fields - set(raw_t)
        if gone:
            raise ConfigError(f"missing config field 'experiment.toggles.{sorted(gone)[0]}'")
        values["toggles"] = Toggles(**raw_t)
    for f in fields(cls):
        if f.name in values and isinstance(getattr(cls(), f.name, None), tuple):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config document must be a JSON object")
    sections = {"benchmark", "experiment", "augment"}
    unknown = set(raw) - sections
    if unknown:
        raise ConfigError(f"unknown config section '{sorted(unknown)[0]}'")
    missing = sections - set(raw)
    if missing:
        raise ConfigError(f"missing config section '{sorted(missing)[0]}'")
    cfg = RunConfig(
        benchmark=_section_from_dict("benchmark", SyntheticBenchConfig, raw["benchmark"]),
        experiment=_section_from_dict("experiment", ExperimentConfig, raw["experiment"]),
        augment=_section_from_dict("augment", AugmentConfig, raw["augment"]))
    cfg.experiment.validate()
    cfg.augment.validate()
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path) as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}")
    return config_from_dict(raw)


def dumps_config(cfg: RunConfig) -> str:
    return json.dumps(config_to_dict(cfg), indent=1, sort_keys=True)


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(dumps_config(cfg).encode()).hexdigest()[:16]


def replace_experiment(cfg: RunConfig, **updates) -> RunConfig:
    return RunConfig(benchmark=cfg.benchmark,
                     experiment=dataclasses.replace(cfg.experiment, **updates),
                     augment=cfg.augment)
