"""Run configuration: profile, config file, flags and seeds.

Precedence is profile defaults < config file < command-line flags. The
config file is flat `key=value` lines; section prefixes route a key to its
model (`net.lstm_layers=2`, `rl.kl_weight=0.05`, `league.matches=50`).
"""

from __future__ import annotations

import logging
import os
import typing
from pathlib import Path
from typing import Any, Mapping, Optional

import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ministar.domain.league import LeagueConfig
from ministar.domain.net_config import PROFILES, NetConfig, profile
from ministar.domain.rl import RLConfig
from ministar.domain.sl import SLConfig
from ministar.drivers.microrts import EnvConfig
from ministar.errors import ConfigError

log = logging.getLogger(__name__)

# ============================ LOAD CONFIG ====================================

load_dotenv()

DEFAULT_PROFILE   = os.getenv("MINISTAR_PROFILE", "tiny")
DEFAULT_OUT       = os.getenv("MINISTAR_OUT", "runs")
DEFAULT_LOG_LEVEL = os.getenv("MINISTAR_LOG_LEVEL", "INFO")
DEFAULT_SEED      = int(os.getenv("MINISTAR_SEED", "0"))

SECTIONS: dict[str, type[BaseModel]] = {
    "net": NetConfig,
    "env": EnvConfig,
    "sl": SLConfig,
    "rl": RLConfig,
    "league": LeagueConfig,
}
TOP_LEVEL = ("profile", "seed", "out", "log_level")

# env fields that must agree with the network
_SHARED = ("minimap_size", "map_channels", "max_entities", "max_selected", "max_delay")


def substream(seed: int, name: str) -> int:
    """Deterministic child seed for a named consumer of randomness."""
    return int(np.random.SeedSequence([int(seed), *name.encode("utf-8")]).generate_state(1)[0])


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    profile: str = DEFAULT_PROFILE
    seed: int = DEFAULT_SEED
    out: Path = Path(DEFAULT_OUT)
    log_level: str = DEFAULT_LOG_LEVEL
    net_overrides: dict[str, Any] = Field(default_factory=dict)
    env_overrides: dict[str, Any] = Field(default_factory=dict)
    sl: SLConfig = Field(default_factory=SLConfig)
    rl: RLConfig = Field(default_factory=RLConfig)
    league: LeagueConfig = Field(default_factory=LeagueConfig)

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}")
        net = self.net
        _ = self.env
        if self.league.learners > net.league_learner_num:
            raise ValueError(f"{self.league.learners} league learners exceed league_learner_num {net.league_learner_num}")
        return self

    @property
    def net(self) -> NetConfig:
        return profile(self.profile, **self.net_overrides)

    @property
    def env(self) -> EnvConfig:
        net = self.net
        shared = {k: getattr(net, k) for k in _SHARED}
        clash = [k for k in _SHARED if k in self.env_overrides and int(self.env_overrides[k]) != shared[k]]
        if clash:
            raise ValueError(f"env.{clash[0]} must match net.{clash[0]}")
        return EnvConfig(**{**self.env_overrides, **shared})

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng(substream(self.seed, name))

    # output layout
    @property
    def checkpoints_dir(self) -> Path:
        return self.out / "checkpoints"

    @property
    def metrics_dir(self) -> Path:
        return self.out / "metrics"

    @property
    def league_dir(self) -> Path:
        return self.out / "league"

    @property
    def replays_dir(self) -> Path:
        return self.out / "replays"


def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat key=value pairs; `#` starts a comment."""
    values: dict[str, str] = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _coerce(model: type[BaseModel], field: str, value: Any) -> Any:
    if not isinstance(value, str):
        return value
    annotation = model.model_fields[field].annotation
    if typing.get_origin(annotation) is tuple:
        return tuple(v.strip() for v in value.split(",") if v.strip())
    return value


def build_run_config(values: Optional[Mapping[str, Any]] = None,
                     overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Assemble a RunConfig from config-file values, then flag overrides.

    Both use the same dotted keys; None overrides are ignored.
    """
    merged = dict(values or {})
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    top: dict[str, Any] = {}
    sections: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    for key, value in merged.items():
        if key in TOP_LEVEL:
            top[key] = value
            continue
        section, _, field = key.partition(".")
        model = SECTIONS.get(section)
        if model is None or field not in model.model_fields:
            raise ConfigError(f"unknown config key {key!r}", key=key)
        sections[section][field] = _coerce(model, field, value)
    built: dict[str, BaseModel] = {}
    for section in ("sl", "rl", "league"):
        built[section] = _validated(section, lambda s=section: SECTIONS[s](**sections[s]))
    _validated("net", lambda: profile(top.get("profile", DEFAULT_PROFILE), **sections["net"]))
    return _validated("run", lambda: RunConfig(
        **top,
        net_overrides=sections["net"],
        env_overrides=sections["env"],
        **built,
    ))


def _validated(section: str, build):
    try:
        return build()
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first.get("loc", ()))
        key = f"{section}.{loc}" if loc and section != "run" else (loc or section)
        raise ConfigError(f"invalid config {key}: {first.get('msg')}", key=key) from exc
