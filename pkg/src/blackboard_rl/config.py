"""Flat ``key = value`` configuration files."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .algos.common import ConfigError, TrainConfig

_BOOLS = {"true": True, "yes": True, "on": True, "1": True, "false": False, "no": False, "off": False, "0": False}


@dataclass
class Config:
    values: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def __getitem__(self, key):
        return self.values[key]

    def train_config(self, **overrides) -> TrainConfig:
        by_key = TrainConfig.keys()
        kwargs = {by_key[k].name: v for k, v in self.values.items()}
        kwargs.update(overrides)
        return TrainConfig(**kwargs)


def _coerce(raw: str, kind, key: str, lineno: int):
    def bad():
        return ConfigError(f"line {lineno}: {key} expects {kind.__name__}, got {raw!r}")

    if kind is bool:
        try:
            return _BOOLS[raw.lower()]
        except KeyError:
            raise bad() from None
    if kind is int:
        try:
            return int(raw, 10)
        except ValueError:
            raise bad() from None
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise bad() from None
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    return raw


def parse_config(text: str) -> Config:
    known = TrainConfig.keys()
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    kinds = {"int": int, "float": float, "bool": bool, "str": str}
    cfg = Config()
    seen: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        kind = kinds[types[known[key].name]]
        value = _coerce(raw, kind, key, lineno)
        if key in seen:
            cfg.warnings.append(f"line {lineno}: {key} repeats line {seen[key]}; the later value wins")
        seen[key] = lineno
        cfg.values[key] = value
    return cfg


def load_config(path) -> Config:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    return parse_config(text)
