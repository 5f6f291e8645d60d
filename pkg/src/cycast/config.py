"""Run configuration: one declarative JSON file plus flag overrides.

Precedence is flags > file > defaults.  Unknown keys anywhere in the file
are rejected so typos fail loudly before any command runs.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

from .ingest import ShipsConfig
from .nowcast import NowcastConfig
from .structsim import StructSimConfig

CONFIG_ENV_VAR = "CYCAST_CONFIG"


@dataclass
class PathsConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    output_dir: str = "out"


@dataclass
class EnsembleConfig:
    case_members: int = 64    # single-anchor guidance
    bulk_members: int = 16    # corpus-wide verification
    chain_intensity: str = "member"  # or "ensemble_mean"


@dataclass
class SynthConfig:
    n_storms: int = 10
    operational_noise_kt: float = 2.0


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    master_seed: int = 0
    structsim: StructSimConfig = field(default_factory=StructSimConfig)
    nowcast: NowcastConfig = field(default_factory=NowcastConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    ships: ShipsConfig = field(default_factory=ShipsConfig)


def _build(cls, data: dict, context: str):
    if not isinstance(data, dict):
        raise ValueError(f"{context}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"{context}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        nested = {
            "paths": PathsConfig, "structsim": StructSimConfig, "nowcast": NowcastConfig,
            "ensemble": EnsembleConfig, "synth": SynthConfig, "ships": ShipsConfig,
        }
        if name in nested and cls is RunConfig:
            kwargs[name] = _build(nested[name], value, f"{context}.{name}")
        elif name == "conv_channels" and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    """Load the run configuration; falls back to the CYCAST_CONFIG env var,
    then to defaults when no file is given."""
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return RunConfig()
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return _build(RunConfig, data, "config")


def config_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def config_hash(config: RunConfig) -> str:
    canon = json.dumps(config_dict(config), sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
