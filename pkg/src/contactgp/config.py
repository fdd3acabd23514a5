"""Run configuration: YAML file parsing, validation, and hashing.

A run configuration has four blocks (model, sampler, data, output). Unknown
keys anywhere are rejected so typos fail loudly instead of silently falling
back to defaults. CLI flags override file values.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from contactgp.inference import SamplerConfig
from contactgp.model import ModelConfig

OUTPUT_ENV_VAR = "CONTACTGP_OUTPUT"


class ConfigError(ValueError):
    """Invalid or unknown run-configuration content."""


@dataclass(frozen=True)
class DataBlock:
    dataset: str | None = None
    population: str | None = None   # path, or "uniform", or "bundled"
    age_range: tuple[int, int] | None = None
    brackets: tuple[str, ...] | None = None


@dataclass(frozen=True)
class OutputBlock:
    directory: str | None = None

    def resolve(self) -> Path:
        if self.directory:
            return Path(self.directory)
        return Path(os.environ.get(OUTPUT_ENV_VAR, "out"))


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    data: DataBlock = field(default_factory=DataBlock)
    output: OutputBlock = field(default_factory=OutputBlock)
    cross_sectional: bool = False
    init: str = "uniform"  # chain initialization: uniform | map

    def __post_init__(self):
        if self.init not in ("uniform", "map"):
            raise ConfigError("init must be 'uniform' or 'map'")

    def effective_model(self) -> ModelConfig:
        if not self.cross_sectional:
            return self.model
        return ModelConfig(
            **{
                **asdict(self.model),
                "fatigue_adjustment": False,
                "detail_adjustment": False,
            }
        )

    def to_dict(self) -> dict:
        return {
            "model": asdict(self.model),
            "sampler": asdict(self.sampler),
            "data": asdict(self.data),
            "output": asdict(self.output),
            "cross_sectional": self.cross_sectional,
            "init": self.init,
        }

    def hash(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


_ADJUSTMENT_KEYS = {"fatigue": "fatigue_adjustment", "detail_proportion": "detail_adjustment"}


def _build_block(cls, raw: dict, context: str):
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {sorted(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def _parse_model_block(raw: dict) -> ModelConfig:
    raw = dict(raw)
    adjustments = raw.pop("adjustments", None)
    if adjustments is not None:
        unknown = set(adjustments) - set(_ADJUSTMENT_KEYS)
        if unknown:
            raise ConfigError(f"unknown keys in model.adjustments: {sorted(unknown)}")
        for key, target in _ADJUSTMENT_KEYS.items():
            if key in adjustments:
                raw[target] = bool(adjustments[key])
    return _build_block(ModelConfig, raw, "model block")


def _parse_data_block(raw: dict) -> DataBlock:
    raw = dict(raw)
    if "age_range" in raw and raw["age_range"] is not None:
        pair = raw["age_range"]
        if len(pair) != 2:
            raise ConfigError("data.age_range must be [min, max]")
        raw["age_range"] = (int(pair[0]), int(pair[1]))
    if "brackets" in raw and raw["brackets"] is not None:
        raw["brackets"] = tuple(str(b) for b in raw["brackets"])
    return _build_block(DataBlock, raw, "data block")


def from_mapping(raw: dict) -> RunConfig:
    raw = dict(raw or {})
    known = {"model", "sampler", "data", "output", "cross_sectional", "init"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    return RunConfig(
        model=_parse_model_block(raw.get("model", {}) or {}),
        sampler=_build_block(SamplerConfig, raw.get("sampler", {}) or {}, "sampler block"),
        data=_parse_data_block(raw.get("data", {}) or {}),
        output=_build_block(OutputBlock, raw.get("output", {}) or {}, "output block"),
        cross_sectional=bool(raw.get("cross_sectional", False)),
        init=str(raw.get("init", "uniform")),
    )


def load(path: str | Path) -> RunConfig:
    text = Path(path).read_text()
    raw = yaml.safe_load(text)
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError("run configuration must be a mapping")
    return from_mapping(raw)
