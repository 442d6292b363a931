"""Experiment configuration: YAML schema with defaults, validation, variant
table and content hashes."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from ceip.envs import PointReachConfig, PointReachEnv, WaypointChainConfig, WaypointChainEnv
from ceip.flow import FlowTrainConfig
from ceip.rl.sac import SacConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Variant:
    name: str
    family: str  # ceip | parrot | bc | replay | naive
    use_ts_flow: bool = False
    use_explicit: bool = False
    use_forward: bool = False
    source: str = ""  # parrot flow data: ta | ts | both


def _variant_table() -> dict[str, Variant]:
    table = {}
    for ts in (False, True):
        for ex, fwd in ((False, False), (True, False), (True, True)):
            name = "CEIP" + ("+TS" if ts else "") + ("+EX" if ex else "") + ("+forward" if fwd else "")
            table[name] = Variant(name, "ceip", ts, ex, fwd)
    for source, label in (("ta", "TA"), ("ts", "TS"), ("both", "(TS+TA)")):
        for ex, fwd in ((False, False), (True, False), (True, True)):
            name = f"PARROT+{label}" + ("+EX" if ex else "") + ("+forward" if fwd else "")
            table[name] = Variant(name, "parrot", source != "ta", ex, fwd, source)
    for ex, fwd in ((False, False), (True, False), (True, True)):
        name = "BC" + ("+EX" if ex else "") + ("+forward" if fwd else "")
        table[name] = Variant(name, "bc", False, ex, fwd)
    table["replay"] = Variant("replay", "replay")
    table["naive"] = Variant("naive", "naive")
    return table


VARIANTS: dict[str, Variant] = _variant_table()


def get_variant(name: str) -> Variant:
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigError(f"unknown variant {name!r}; valid: {', '.join(VARIANTS)}") from None


DEFAULTS: dict[str, Any] = {
    "env": {"kind": "point_reach", "params": {}},
    "data": {
        "path": None,
        "seed": 0,
        "expert_noise": 0.1,
        # point_reach: ta_directions, n_ta, n_ts
        # waypoint_chain: n_ta, n_ts, ta_length, exclude, dwell, dwell_noise
        "params": {},
    },
    "clustering": {"k": 8, "seed": 0, "max_iters": 100},
    "flows": {},
    "combination": {},
    "bc": {"clip_norm": 1.0},
    "rl": {},
    "eval": {"episodes": 10},
    "variant": "CEIP",
    "seeds": [0, 1, 2, 3, 4],
    "record_coefficients": False,
}

# architecture defaults that differ between the two environments
ENV_DEFAULTS: dict[str, dict] = {
    "point_reach": {
        "flows": {"hidden_widths": [32]},
        "combination": {"hidden_widths": [32, 32]},
        "clustering": {"k": 8},
    },
    "waypoint_chain": {
        "flows": {"hidden_widths": [256, 256], "batchnorm": True},
        "combination": {"hidden_widths": [64]},
        "clustering": {"k": 4},
    },
}

# sections whose keys are checked against a dataclass instead of DEFAULTS
_OPEN_SECTIONS = {"flows", "combination", "bc", "rl", "params"}

_DATA_PARAMS = {
    "point_reach": {"ta_directions", "n_ta", "n_ts"},
    "waypoint_chain": {"n_ta", "n_ts", "ta_length", "exclude", "dwell", "dwell_noise"},
}


def _merge(base: dict, over: Mapping, path: str = "", open_keys: bool = False) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base and not open_keys:
            raise ConfigError(f"unknown config key {path}{k!r}")
        if isinstance(base.get(k), dict) and isinstance(v, Mapping):
            out[k] = _merge(base[k], v, f"{path}{k}.", k in _OPEN_SECTIONS)
        elif isinstance(base.get(k), dict) and v is not None:
            raise ConfigError(f"config key {path}{k!r} must be a mapping")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _dataclass_kwargs(cls, section: Mapping, where: str) -> dict:
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    return dict(section)


def canonical_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=list).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class ExperimentConfig:
    """Validated experiment configuration.

    ``raw`` is the fully merged mapping; typed views are built on access.
    """

    def __init__(self, raw: Mapping):
        raw = raw or {}
        env = raw.get("env") or {}
        kind = env.get("kind", DEFAULTS["env"]["kind"]) if isinstance(env, Mapping) else None
        if kind not in ENV_DEFAULTS:
            raise ConfigError(f"env.kind must be one of {sorted(ENV_DEFAULTS)}, got {kind!r}")
        self.raw = _merge(_merge(DEFAULTS, ENV_DEFAULTS[kind]), raw)
        self._validate()

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
        if not isinstance(raw, Mapping):
            raise ConfigError("config must be a mapping at top level")
        return cls(raw)

    def replace(self, **overrides) -> ExperimentConfig:
        raw = copy.deepcopy(self.raw)
        raw.update(overrides)
        return ExperimentConfig(raw)

    def _validate(self) -> None:
        kind = self.env_kind
        extra = set(self.raw["data"]["params"]) - _DATA_PARAMS[kind]
        if extra:
            raise ConfigError(f"unknown data.params for {kind}: {sorted(extra)}")
        for key in ("n_ta", "n_ts"):
            v = self.raw["data"]["params"].get(key)
            if v is not None and int(v) < 1:
                raise ConfigError(f"data.params.{key} must be >= 1")
        if int(self.raw["clustering"]["k"]) < 1:
            raise ConfigError("clustering.k must be >= 1")
        get_variant(self.raw["variant"])
        if not self.raw["seeds"]:
            raise ConfigError("seeds must be non-empty")
        try:
            self.env_config()
            self.flow_config()
            self.combination_config()
            self.bc_config(0)
            self.sac_config(0)
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e

    # typed views -----------------------------------------------------------

    @property
    def env_kind(self) -> str:
        return self.raw["env"]["kind"]

    @property
    def variant(self) -> Variant:
        return get_variant(self.raw["variant"])

    @property
    def seeds(self) -> list[int]:
        return [int(s) for s in self.raw["seeds"]]

    @property
    def eval_episodes(self) -> int:
        return int(self.raw["eval"]["episodes"])

    def env_config(self):
        params = self.raw["env"]["params"]
        if self.env_kind == "point_reach":
            return PointReachConfig(**_dataclass_kwargs(PointReachConfig, params, "env.params"))
        return WaypointChainConfig(**_dataclass_kwargs(WaypointChainConfig, params, "env.params"))

    def env_factory(self):
        cfg = self.env_config()
        cls = PointReachEnv if self.env_kind == "point_reach" else WaypointChainEnv
        return _EnvFactory(cls, cfg)

    def flow_config(self) -> FlowTrainConfig:
        return FlowTrainConfig(**_dataclass_kwargs(FlowTrainConfig, self.raw["flows"], "flows"))

    def combination_config(self) -> FlowTrainConfig:
        return FlowTrainConfig(**_dataclass_kwargs(FlowTrainConfig, self.raw["combination"], "combination"))

    def bc_config(self, seed: int) -> FlowTrainConfig:
        kw = _dataclass_kwargs(FlowTrainConfig, self.raw["bc"], "bc")
        kw["seed"] = seed
        return FlowTrainConfig(**kw)

    def sac_config(self, seed: int) -> SacConfig:
        kw = _dataclass_kwargs(SacConfig, self.raw["rl"], "rl")
        kw["seed"] = seed
        kw.setdefault("eval_episodes", self.eval_episodes)
        return SacConfig(**kw)

    # hashes ------------------------------------------------------------------

    def section_hash(self, *keys: str) -> str:
        return canonical_hash({k: self.raw[k] for k in keys})

    def config_hash(self) -> str:
        return canonical_hash(self.raw)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


class _EnvFactory:
    """Picklable zero-argument env constructor."""

    def __init__(self, cls, cfg):
        self.cls, self.cfg = cls, cfg

    def __call__(self):
        return self.cls(self.cfg)
