"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig, TrainConfig

RUN_DEFAULTS = {
    "data": "",           # grid CSV; empty means synthesize
    "mix": "",            # optional generation-mix CSV supplying CIF
    "stride": 1,
    "folds": 5,
    "purge_gap": 47,      # T + S - 1 removes all input/target overlap
    "output_dir": "runs",
    "days": 365,          # synthetic data when no CSV is given
    "penetration": 0.5,
    "noise": 1.0,
    "synth_seed": 7,
}
MODEL_DEFAULTS = {f.name: f.default for f in fields(ModelConfig)}
TRAIN_DEFAULTS = {f.name: f.default for f in fields(TrainConfig)}
DEFAULTS = {**RUN_DEFAULTS, **MODEL_DEFAULTS, **TRAIN_DEFAULTS}

# short names matching the usual symbols
ALIASES = {"d": "max_length", "Z_k": "filters_per_length", "J": "n_scales", "h": "bandwidth"}


def _coerce(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(part.strip() for part in text.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


class RunConfig:
    """Every knob has a default; unknown keys are rejected."""

    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    def set(self, key, value):
        key = ALIASES.get(key, key)
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[ALIASES.get(key, key)]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for number, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{number}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            try:
                cfg.set(key, value)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{number}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        return cls.parse(path.read_text(encoding="utf-8"), str(path))

    def override(self, pairs) -> "RunConfig":
        """Apply ``key=value`` strings (CLI ``--set``)."""
        for pair in pairs or ():
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, value = pair.split("=", 1)
            self.set(key.strip(), value)
        return self

    def model_config(self) -> ModelConfig:
        return ModelConfig(**{k: self.values[k] for k in MODEL_DEFAULTS}).validate()

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in TRAIN_DEFAULTS}).validate()

    def dump(self) -> str:
        lines = []
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, tuple):
                v = ",".join(v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"

    def echo(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items())}

    def digest(self) -> str:
        return hashlib.sha1(json.dumps(self.echo(), sort_keys=True).encode()).hexdigest()[:10]
