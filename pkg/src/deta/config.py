"""TOML run configuration: generator settings, training settings and file paths."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import tomli
import tomli_w

from .synthdata import ShiftConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class PathConfig:
    source: str | None = None
    target: str | None = None
    checkpoint: str | None = None
    out: str | None = None


SECTIONS = {"shift": ShiftConfig, "train": TrainConfig, "paths": PathConfig}


@dataclass
class RunConfig:
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return RunConfig(
            dataclasses.replace(self.shift, seed=seed),
            dataclasses.replace(self.train, seed=seed),
            self.paths,
        )

    def validate(self) -> None:
        try:
            self.shift.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.shift.k_bins != self.train.k_bins:
            raise ConfigError(f"shift.k_bins={self.shift.k_bins} but train.k_bins={self.train.k_bins}")

    def to_dict(self) -> dict:
        out = {}
        for name in SECTIONS:
            values = dataclasses.asdict(getattr(self, name))
            out[name] = {k: v for k, v in values.items() if v is not None}
        return out


def _coerce(section: str, f: dataclasses.Field, value):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    where = f"{section}.{f.name}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        ):
            raise ConfigError(f"{where} must be a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    parts = {}
    for name, cls in SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        known = {f.name: f for f in dataclasses.fields(cls)}
        bad = set(raw) - set(known)
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        parts[name] = cls(**{k: _coerce(name, known[k], v) for k, v in raw.items()})
    cfg = RunConfig(**parts)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    """Read a TOML run config; ``None`` gives the defaults."""
    if path is None:
        return config_from_dict({})
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def save_config(path: str | Path, cfg: RunConfig) -> None:
    Path(path).write_text(dump_config(cfg), encoding="utf-8")
